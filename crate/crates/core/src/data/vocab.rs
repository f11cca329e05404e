use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::Lang;

use super::corpus::{MultiParallelCorpus, Sentence};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

pub fn lang_token(lang: &Lang) -> String {
    format!("<2{lang}>")
}

/// Token inventory in rank order; reserved ids come first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    reserved: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, reserved: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::config(format!("invalid vocabulary token {t:?} at line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index, reserved })
    }

    /// Ranks `counts` by descending frequency, ties lexicographic, keeping `size` entries in total.
    pub fn from_counts(counts: &HashMap<&str, usize>, size: usize, target_langs: &[Lang]) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(target_langs.iter().map(lang_token));
        let reserved = tokens.len();
        if size < reserved {
            return Err(Error::config(format!("vocabulary size {size} is smaller than the {reserved} reserved tokens")));
        }
        let mut ranked: Vec<(&str, usize)> =
            counts.iter().filter(|(t, _)| !tokens.iter().any(|r| r == *t)).map(|(t, c)| (*t, *c)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        tokens.extend(ranked.into_iter().take(size - reserved).map(|(t, _)| t.to_string()));
        Self::from_tokens(tokens, reserved)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of reserved entries (specials plus target-language tokens).
    pub fn reserved(&self) -> usize {
        self.reserved
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        (id as usize) < self.reserved
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn lang_id(&self, lang: &Lang) -> Option<u32> {
        self.get(&lang_token(lang)).filter(|&id| self.is_reserved(id))
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<u32> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to tokens; PAD/BOS/EOS and target-language tokens are dropped.
    pub fn decode(&self, ids: &[u32]) -> Sentence {
        ids.iter()
            .filter(|&&id| id == UNK || !self.is_reserved(id))
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK as usize]).to_string())
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::config("vocabulary file must start with <pad> <s> </s> <unk>"));
        }
        let reserved =
            SPECIALS.len() + tokens[SPECIALS.len()..].iter().take_while(|t| t.starts_with("<2") && t.ends_with('>') && t.len() > 3).count();
        Self::from_tokens(tokens, reserved)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        let mut text = tokens.join("\n");
        text.push('\n');
        Vocabulary::from_text(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "size")]
pub enum VocabMode {
    /// One vocabulary over all languages, with a reserved target token per language.
    Joint(usize),
    PerLanguage(usize),
}

/// Vocabularies for every language of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabSet {
    Joint(Vocabulary),
    PerLanguage(BTreeMap<Lang, Vocabulary>),
}

impl VocabSet {
    pub fn get(&self, lang: &Lang) -> Result<&Vocabulary> {
        match self {
            VocabSet::Joint(v) => Ok(v),
            VocabSet::PerLanguage(m) => m.get(lang).ok_or_else(|| Error::config(format!("no vocabulary for language `{lang}`"))),
        }
    }

    pub fn is_joint(&self) -> bool {
        matches!(self, VocabSet::Joint(_))
    }

    /// Adds (or replaces) the per-language vocabulary of `lang`.
    pub fn insert(&mut self, lang: Lang, vocab: Vocabulary) -> Result<()> {
        match self {
            VocabSet::Joint(_) => Err(Error::config("a joint vocabulary cannot take new languages")),
            VocabSet::PerLanguage(m) => {
                m.insert(lang, vocab);
                Ok(())
            }
        }
    }

    /// Writes `dict.txt` (joint) or `dict.{lang}.txt` files.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        match self {
            VocabSet::Joint(v) => v.save(&dir.join("dict.txt")),
            VocabSet::PerLanguage(m) => m.iter().try_for_each(|(l, v)| v.save(&dir.join(format!("dict.{l}.txt")))),
        }
    }
}

fn count_tokens<'a>(sents: impl Iterator<Item = &'a Sentence>, counts: &mut HashMap<&'a str, usize>) {
    for s in sents {
        for t in s {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
}

/// Builds the vocabulary set for `corpus` under `mode`.
pub fn build_vocab(corpus: &MultiParallelCorpus, mode: VocabMode) -> Result<VocabSet> {
    if corpus.is_empty() {
        return Err(Error::config("cannot build a vocabulary from an empty corpus"));
    }
    match mode {
        VocabMode::Joint(size) => {
            let mut counts = HashMap::new();
            for l in 0..corpus.languages().len() {
                count_tokens((0..corpus.len()).map(|r| corpus.sentence(r, l)), &mut counts);
            }
            Ok(VocabSet::Joint(Vocabulary::from_counts(&counts, size, corpus.languages())?))
        }
        VocabMode::PerLanguage(size) => {
            let mut out = BTreeMap::new();
            for (l, lang) in corpus.languages().iter().enumerate() {
                let mut counts = HashMap::new();
                count_tokens((0..corpus.len()).map(|r| corpus.sentence(r, l)), &mut counts);
                out.insert(lang.clone(), Vocabulary::from_counts(&counts, size, &[])?);
            }
            Ok(VocabSet::PerLanguage(out))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(langs: &[&str], rows: &[&[&str]]) -> MultiParallelCorpus {
        MultiParallelCorpus::new(
            langs.iter().map(|l| Lang::new(*l).unwrap()).collect(),
            rows.iter().map(|r| r.iter().map(|s| s.split_whitespace().map(str::to_string).collect()).collect()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn frequency_ranked_with_lexicographic_ties() {
        let c = corpus(&["a"], &[&["x y z z"], &["y x w q z"]]);
        let VocabSet::PerLanguage(m) = build_vocab(&c, VocabMode::PerLanguage(7)).unwrap() else { panic!() };
        let v = &m[&Lang::new("a").unwrap()];
        assert_eq!(&v.tokens()[4..], &["z", "x", "y"]);
        assert_eq!(v.id("w"), UNK);
        assert_eq!(v.id("q"), UNK);
        assert_eq!(v.encode(&["z".into(), "w".into()]), vec![4, UNK]);
    }

    #[test]
    fn joint_mode_reserves_target_tokens() {
        let c = corpus(&["de", "en", "fi", "fr"], &[&["a", "b", "c", "d"]]);
        let VocabSet::Joint(v) = build_vocab(&c, VocabMode::Joint(100)).unwrap() else { panic!() };
        let ids: Vec<u32> = c.languages().iter().map(|l| v.lang_id(l).unwrap()).collect();
        assert_eq!(ids, vec![4, 5, 6, 7]);
        assert_eq!(v.reserved(), 8);
        assert_eq!(v.len(), 12);
        assert!(build_vocab(&c, VocabMode::Joint(7)).is_err());
        assert!(build_vocab(&c, VocabMode::PerLanguage(3)).is_err());
    }

    #[test]
    fn save_load_keeps_ids() {
        let c = corpus(&["de", "en"], &[&["a b", "c"], &["b", "c d"]]);
        let set = build_vocab(&c, VocabMode::Joint(20)).unwrap();
        let again = build_vocab(&c, VocabMode::Joint(20)).unwrap();
        let (VocabSet::Joint(v), VocabSet::Joint(w)) = (&set, &again) else { panic!() };
        assert_eq!(v.to_text().as_bytes(), w.to_text().as_bytes());
        let dir = tempfile::tempdir().unwrap();
        set.save_dir(dir.path()).unwrap();
        let back = Vocabulary::load(&dir.path().join("dict.txt")).unwrap();
        assert_eq!(&back, v);
        assert_eq!(back.reserved(), 6);
        let json = serde_json::to_string(&set).unwrap();
        assert_eq!(serde_json::from_str::<VocabSet>(&json).unwrap(), set);
    }

    #[test]
    fn decode_drops_control_tokens() {
        let c = corpus(&["de", "en"], &[&["a", "b"]]);
        let VocabSet::Joint(v) = build_vocab(&c, VocabMode::Joint(20)).unwrap() else { panic!() };
        let a = v.id("a");
        assert_eq!(v.decode(&[BOS, 4, a, UNK, EOS, PAD]), vec!["a".to_string(), "<unk>".to_string()]);
    }
}
