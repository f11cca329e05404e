use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::{Direction, Lang};

/// Whitespace-tokenized sentence.
pub type Sentence = Vec<String>;

/// Row-aligned sentences: one per language per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiParallelCorpus {
    languages: Vec<Lang>,
    rows: Vec<Vec<Sentence>>,
}

impl MultiParallelCorpus {
    pub fn new(languages: Vec<Lang>, rows: Vec<Vec<Sentence>>) -> Result<Self> {
        if languages.is_empty() {
            return Err(Error::config("corpus needs at least one language"));
        }
        if let Some(r) = rows.iter().position(|row| row.len() != languages.len()) {
            return Err(Error::config(format!("row {r} has {} sentences for {} languages", rows[r].len(), languages.len())));
        }
        Ok(MultiParallelCorpus { languages, rows })
    }

    pub fn languages(&self) -> &[Lang] {
        &self.languages
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn lang_index(&self, lang: &Lang) -> Result<usize> {
        self.languages.iter().position(|l| l == lang).ok_or_else(|| Error::config(format!("language `{lang}` not in corpus")))
    }

    pub fn sentence(&self, row: usize, lang: usize) -> &Sentence {
        &self.rows[row][lang]
    }

    pub fn column(&self, lang: &Lang) -> Result<Vec<&Sentence>> {
        let i = self.lang_index(lang)?;
        Ok(self.rows.iter().map(|r| &r[i]).collect())
    }

    /// Bitext for `dir` restricted to `row_ids`.
    /// Sub-corpus with only the given language columns, in the given order.
    pub fn select(&self, langs: &[Lang]) -> Result<Self> {
        let idx: Vec<usize> = langs.iter().map(|l| self.lang_index(l)).collect::<Result<_>>()?;
        let rows = self.rows.iter().map(|row| idx.iter().map(|&i| row[i].clone()).collect()).collect();
        Self::new(langs.to_vec(), rows)
    }

    pub fn bitext(&self, dir: &Direction, row_ids: &[usize]) -> Result<Bitext> {
        let (si, ti) = (self.lang_index(&dir.src)?, self.lang_index(&dir.tgt)?);
        if let Some(&bad) = row_ids.iter().find(|&&r| r >= self.rows.len()) {
            return Err(Error::contract(format!("row {bad} outside corpus of {}", self.rows.len())));
        }
        Ok(Bitext {
            direction: dir.clone(),
            src: row_ids.iter().map(|&r| self.rows[r][si].clone()).collect(),
            tgt: row_ids.iter().map(|&r| self.rows[r][ti].clone()).collect(),
            row_ids: row_ids.to_vec(),
        })
    }
}

/// Aligned source/target sentences of one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Bitext {
    pub direction: Direction,
    pub src: Vec<Sentence>,
    pub tgt: Vec<Sentence>,
    pub row_ids: Vec<usize>,
}

impl Bitext {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Writes `{name}.{src}-{tgt}.{src}` and `{name}.{src}-{tgt}.{tgt}`, one sentence per line.
    pub fn write_files(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let d = &self.direction;
        for (lang, sents) in [(&d.src, &self.src), (&d.tgt, &self.tgt)] {
            let path = dir.join(format!("{name}.{}-{}.{lang}", d.src, d.tgt));
            let mut f = fs::File::create(path)?;
            for s in sents {
                writeln!(f, "{}", s.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_files(dir: &Path, name: &str, direction: &Direction) -> Result<Self> {
        let read = |lang: &Lang| -> Result<Vec<Sentence>> {
            let path = dir.join(format!("{name}.{}-{}.{lang}", direction.src, direction.tgt));
            Ok(fs::read_to_string(path)?.lines().map(|l| l.split_whitespace().map(str::to_string).collect()).collect())
        };
        let src = read(&direction.src)?;
        let tgt = read(&direction.tgt)?;
        if src.len() != tgt.len() {
            return Err(Error::config(format!("bitext {name}.{direction} has {} source but {} target lines", src.len(), tgt.len())));
        }
        Ok(Bitext { direction: direction.clone(), row_ids: (0..src.len()).collect(), src, tgt })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Train,
    Valid,
    Test,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Train, Segment::Valid, Segment::Test];

    pub fn name(self) -> &'static str {
        match self {
            Segment::Train => "train",
            Segment::Valid => "valid",
            Segment::Test => "test",
        }
    }
}

/// Train/valid/test multi-parallel corpora over the same languages.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSegments {
    pub train: MultiParallelCorpus,
    pub valid: MultiParallelCorpus,
    pub test: MultiParallelCorpus,
}

impl CorpusSegments {
    pub fn get(&self, seg: Segment) -> &MultiParallelCorpus {
        match seg {
            Segment::Train => &self.train,
            Segment::Valid => &self.valid,
            Segment::Test => &self.test,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> Sentence {
        x.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn rows_must_cover_every_language() {
        let langs = vec![Lang::new("a").unwrap(), Lang::new("b").unwrap()];
        assert!(MultiParallelCorpus::new(langs.clone(), vec![vec![s("x")]]).is_err());
        let c = MultiParallelCorpus::new(langs, vec![vec![s("x y"), s("u v")], vec![s("z"), s("w")]]).unwrap();
        let b = c.bitext(&"b-a".parse().unwrap(), &[1]).unwrap();
        assert_eq!(b.src, vec![s("w")]);
        assert_eq!(b.tgt, vec![s("z")]);
    }

    #[test]
    fn bitext_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let langs = vec![Lang::new("a").unwrap(), Lang::new("b").unwrap()];
        let c = MultiParallelCorpus::new(langs, vec![vec![s("x y"), s("u v")], vec![s("z"), s("w")]]).unwrap();
        let d: Direction = "a-b".parse().unwrap();
        let b = c.bitext(&d, &[0, 1]).unwrap();
        b.write_files(dir.path(), "train").unwrap();
        assert!(dir.path().join("train.a-b.a").exists());
        let back = Bitext::read_files(dir.path(), "train", &d).unwrap();
        assert_eq!(back.src, b.src);
        assert_eq!(back.tgt, b.tgt);
    }
}
