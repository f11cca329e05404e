use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{min_parts, Reorder, Tier, VocabMode};
use crate::error::{Error, Result};
use crate::eval::{DecodeConfig, LengthPenalty};
use crate::lang::{parse_langs, Lang, LangPair};
use crate::tensor::{AdamConfig, LrSchedule};
use crate::train::{ScheduleKind, TrainConfig};
use crate::transformer::TransformerConfig;
use crate::zoo::{trainable_directions, Init, ModelKind, Scheme};

/// Where the multi-parallel corpus comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SynthSection),
    /// Row-aligned `{train,valid,test}.{lang}` files in a directory.
    Files(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSection {
    /// Languages to generate; a superset of the model languages.
    pub languages: Vec<Lang>,
    pub rows: usize,
    pub valid_rows: usize,
    pub test_rows: usize,
    pub concepts: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub zipf: f64,
    pub reorders: Option<Vec<Reorder>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeSection {
    pub ratio: [u64; 3],
    pub high: u64,
    pub tiers: BTreeMap<LangPair, Tier>,
}

/// Adding one language to a trained M2.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementSection {
    pub lang: Lang,
    pub anchors: Vec<Lang>,
    pub aux: Vec<Lang>,
    pub init: Init,
    /// Directory of the base run; defaults to `out`.
    pub base: Option<PathBuf>,
    /// Train two-leg Single baselines through the first anchor.
    pub pivot: bool,
    pub max_epochs: Option<usize>,
}

/// One declarative experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub out: PathBuf,
    pub deterministic: bool,
    pub kind: ModelKind,
    pub preset: String,
    pub transformer: TransformerConfig,
    pub languages: Vec<Lang>,
    pub scheme: Scheme,
    pub data: DataSource,
    pub sharing: bool,
    pub parts: Option<usize>,
    pub size: Option<SizeSection>,
    pub vocab_size: Option<usize>,
    pub bpe_merges: usize,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval_sentences: Option<usize>,
    pub eval_all: bool,
    pub probe: bool,
    pub probe_pairs: usize,
    pub increment: Option<IncrementSection>,
    raw: BTreeMap<String, String>,
}

const KEYS: &[&str] = &[
    "run.name",
    "run.seed",
    "run.out",
    "run.deterministic",
    "model.kind",
    "model.preset",
    "model.d_model",
    "model.ff_dim",
    "model.heads",
    "model.encoder_layers",
    "model.decoder_layers",
    "model.dropout",
    "model.attention_dropout",
    "model.activation_dropout",
    "model.max_positions",
    "model.languages",
    "model.scheme",
    "data.source",
    "data.dir",
    "data.mode",
    "data.parts",
    "data.bpe_merges",
    "synth.languages",
    "synth.rows",
    "synth.valid_rows",
    "synth.test_rows",
    "synth.concepts",
    "synth.min_len",
    "synth.max_len",
    "synth.zipf",
    "synth.reorders",
    "size.ratio",
    "size.high",
    "size.tiers",
    "vocab.size",
    "train.budget",
    "train.schedule",
    "train.max_epochs",
    "train.patience",
    "train.warmup",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.valid_tokens",
    "decode.beam",
    "decode.alpha",
    "decode.penalty",
    "decode.max_len",
    "eval.sentences",
    "eval.directions",
    "probe.enabled",
    "probe.pairs",
    "increment.lang",
    "increment.anchors",
    "increment.aux",
    "increment.init",
    "increment.base",
    "increment.pivot",
    "increment.max_epochs",
];

/// Overrides given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
    pub preset: Option<String>,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim().to_string();
        if !KEYS.contains(&k.as_str()) {
            return Err(Error::config(format!("line {}: unknown key `{k}`", i + 1)));
        }
        let v = v.split_whitespace().collect::<Vec<_>>().join(" ");
        if out.insert(k.clone(), v).is_some() {
            return Err(Error::config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(out)
}

struct Keys<'a>(&'a BTreeMap<String, String>);

impl Keys<'_> {
    fn str(&self, k: &str) -> Option<&str> {
        self.0.get(k).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, k: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.str(k).map(|v| v.parse::<T>().map_err(|e| Error::config(format!("`{k}`: {e}")))).transpose()
    }

    fn or<T: std::str::FromStr>(&self, k: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(k)?.unwrap_or(default))
    }

    fn bool(&self, k: &str, default: bool) -> Result<bool> {
        match self.str(k) {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(Error::config(format!("`{k}`: expected a boolean, got `{v}`"))),
        }
    }

    fn langs(&self, k: &str) -> Result<Option<Vec<Lang>>> {
        self.str(k).map(parse_langs).transpose()
    }
}

fn parse_ratio(s: &str) -> Result<[u64; 3]> {
    let v: Vec<u64> =
        s.split(':').map(|x| x.trim().parse().map_err(|_| Error::config(format!("bad ratio `{s}`")))).collect::<Result<_>>()?;
    <[u64; 3]>::try_from(v).map_err(|_| Error::config(format!("ratio `{s}` needs low:medium:high")))
}

fn parse_tiers(s: &str) -> Result<BTreeMap<LangPair, Tier>> {
    let mut out = BTreeMap::new();
    for item in s.split_whitespace() {
        let (pair, tier) = item.split_once(':').ok_or_else(|| Error::config(format!("tier entry `{item}` is not `a-b:tier`")))?;
        let (a, b) = pair.split_once('-').ok_or_else(|| Error::config(format!("tier entry `{item}` is not `a-b:tier`")))?;
        out.insert(LangPair::new(a.parse()?, b.parse()?), tier.parse()?);
    }
    Ok(out)
}

fn parse_init(s: &str) -> Result<Init> {
    match s.split_once(':') {
        None if s == "random" => Ok(Init::Random),
        Some(("donor", l)) => Ok(Init::Donor(l.parse()?)),
        _ => Err(Error::config(format!("init must be `random` or `donor:LANG`, got `{s}`"))),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &Overrides) -> Result<Self> {
        let mut raw = parse_pairs(text)?;
        if let Some(s) = overrides.seed {
            raw.insert("run.seed".into(), s.to_string());
        }
        if let Some(o) = &overrides.out {
            raw.insert("run.out".into(), o.display().to_string());
        }
        if overrides.deterministic {
            raw.insert("run.deterministic".into(), "true".into());
        }
        if let Some(p) = &overrides.preset {
            raw.insert("model.preset".into(), p.clone());
        }
        let cfg = Self::from_pairs(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_pairs(raw: BTreeMap<String, String>) -> Result<Self> {
        let k = Keys(&raw);
        let kind: ModelKind = k.parse("model.kind")?.ok_or_else(|| Error::config("`model.kind` is required"))?;
        let preset = k.str("model.preset").unwrap_or("desk").to_string();
        let p = TransformerConfig::preset(&preset)?;
        let transformer = TransformerConfig {
            d_model: k.or("model.d_model", p.d_model)?,
            ff_dim: k.or("model.ff_dim", p.ff_dim)?,
            num_heads: k.or("model.heads", p.num_heads)?,
            num_encoder_layers: k.or("model.encoder_layers", p.num_encoder_layers)?,
            num_decoder_layers: k.or("model.decoder_layers", p.num_decoder_layers)?,
            dropout: k.or("model.dropout", p.dropout)?,
            attention_dropout: k.or("model.attention_dropout", p.attention_dropout)?,
            activation_dropout: k.or("model.activation_dropout", p.activation_dropout)?,
            max_positions: k.or("model.max_positions", p.max_positions)?,
        };
        let languages = k.langs("model.languages")?.ok_or_else(|| Error::config("`model.languages` is required"))?;
        let scheme = k.or("model.scheme", Scheme::M2M)?;
        let data = match k.str("data.source").unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic(SynthSection {
                languages: k.langs("synth.languages")?.unwrap_or_else(|| languages.clone()),
                rows: k.or("synth.rows", 5000)?,
                valid_rows: k.or("synth.valid_rows", 500)?,
                test_rows: k.or("synth.test_rows", 500)?,
                concepts: k.or("synth.concepts", 200)?,
                min_len: k.or("synth.min_len", 4)?,
                max_len: k.or("synth.max_len", 12)?,
                zipf: k.or("synth.zipf", 1.0)?,
                reorders: k
                    .str("synth.reorders")
                    .map(|s| s.split_whitespace().map(str::parse).collect::<Result<Vec<Reorder>>>())
                    .transpose()?,
            }),
            "files" => {
                DataSource::Files(PathBuf::from(k.str("data.dir").ok_or_else(|| Error::config("`data.source = files` needs `data.dir`"))?))
            }
            other => return Err(Error::config(format!("unknown data.source `{other}`"))),
        };
        let sharing = match k.str("data.mode").unwrap_or("nonsharing") {
            "nonsharing" | "non-sharing" => false,
            "sharing" => true,
            other => return Err(Error::config(format!("data.mode must be sharing or nonsharing, got `{other}`"))),
        };
        let size = match (k.str("size.ratio"), k.parse::<u64>("size.high")?, k.str("size.tiers")) {
            (None, None, None) => None,
            (ratio, Some(high), Some(tiers)) => {
                Some(SizeSection { ratio: parse_ratio(ratio.unwrap_or("1:1:1"))?, high, tiers: parse_tiers(tiers)? })
            }
            _ => return Err(Error::config("a size plan needs `size.high` and `size.tiers`")),
        };
        let defaults = TrainConfig::default();
        let lr = LrSchedule::new(k.or("train.warmup", defaults.lr.warmup_steps)?, k.or("train.lr", defaults.lr.peak_lr)?)
            .map_err(|e| Error::config(e.to_string()))?;
        let seed = k.or("run.seed", 1u64)?;
        let deterministic = k.bool("run.deterministic", true)?;
        let train = TrainConfig {
            budget: k.or("train.budget", defaults.budget)?,
            schedule: k.or("train.schedule", ScheduleKind::RoundRobin)?,
            max_epochs: k.or("train.max_epochs", defaults.max_epochs)?,
            patience: k.parse("train.patience")?,
            lr,
            adam: AdamConfig {
                beta1: k.or("train.beta1", defaults.adam.beta1)?,
                beta2: k.or("train.beta2", defaults.adam.beta2)?,
                eps: k.or("train.eps", defaults.adam.eps)?,
            },
            seed,
            valid_batch_tokens: k.or("train.valid_tokens", defaults.valid_batch_tokens)?,
            deterministic,
        };
        let dd = DecodeConfig::default();
        let decode = DecodeConfig {
            beam_size: k.or("decode.beam", dd.beam_size)?,
            alpha: k.or("decode.alpha", dd.alpha)?,
            penalty: match k.str("decode.penalty") {
                None => dd.penalty,
                Some("fairseq") => LengthPenalty::Fairseq,
                Some("gnmt") => LengthPenalty::Gnmt,
                Some(o) => return Err(Error::config(format!("unknown length penalty `{o}`"))),
            },
            max_len: k.parse("decode.max_len")?,
        };
        let eval_all = match k.str("eval.directions").unwrap_or("trained") {
            "trained" => false,
            "all" => true,
            o => return Err(Error::config(format!("eval.directions must be trained or all, got `{o}`"))),
        };
        let increment = match k.str("increment.lang") {
            None => None,
            Some(l) => Some(IncrementSection {
                lang: l.parse()?,
                anchors: k.langs("increment.anchors")?.ok_or_else(|| Error::config("`increment.anchors` is required"))?,
                aux: k.langs("increment.aux")?.unwrap_or_default(),
                init: k.str("increment.init").map(parse_init).transpose()?.unwrap_or(Init::Random),
                base: k.str("increment.base").map(PathBuf::from),
                pivot: k.bool("increment.pivot", true)?,
                max_epochs: k.parse("increment.max_epochs")?,
            }),
        };
        Ok(ExperimentConfig {
            name: k.str("run.name").unwrap_or("run").to_string(),
            seed,
            out: PathBuf::from(k.str("run.out").unwrap_or("runs/run")),
            deterministic,
            kind,
            preset,
            transformer,
            languages,
            scheme,
            data,
            sharing,
            parts: k.parse("data.parts")?,
            size,
            vocab_size: k.parse("vocab.size")?,
            bpe_merges: k.or("data.bpe_merges", 0)?,
            train,
            decode,
            eval_sentences: k.parse("eval.sentences")?,
            eval_all,
            probe: k.bool("probe.enabled", kind != ModelKind::Single)?,
            probe_pairs: k.or("probe.pairs", 200)?,
            increment,
            raw,
        })
    }

    /// Checks cross-field constraints before any data is produced.
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        self.decode.validate().map_err(|e| Error::config(e.to_string()))?;
        if self.languages.len() < 2 {
            return Err(Error::config("at least two model languages are needed"));
        }
        trainable_directions(&self.scheme, &self.languages).map_err(|e| Error::config(e.to_string()))?;
        let corpus_langs = self.corpus_languages();
        if let Some(l) = self.languages.iter().find(|l| !corpus_langs.contains(l)) {
            return Err(Error::config(format!("model language `{l}` is not in the corpus languages")));
        }
        if let DataSource::Synthetic(s) = &self.data {
            if s.min_len == 0 || s.min_len > s.max_len {
                return Err(Error::config(format!("bad synthetic length range {}..={}", s.min_len, s.max_len)));
            }
            if s.concepts == 0 || s.rows == 0 || s.valid_rows == 0 || s.test_rows == 0 {
                return Err(Error::config("synthetic sizes must be positive"));
            }
            if s.max_len + 3 > self.transformer.max_positions {
                return Err(Error::config("synth.max_len does not fit model.max_positions"));
            }
        }
        if let Some(p) = self.parts {
            let need = min_parts(corpus_langs.len());
            if p < need {
                return Err(Error::config(format!("data.parts {p} is below the {need} parts {} languages need", corpus_langs.len())));
            }
        }
        if let Some(size) = &self.size {
            let pairs = crate::lang::all_pairs(&self.languages);
            if let Some(p) = pairs.iter().find(|p| !size.tiers.contains_key(*p)) {
                return Err(Error::config(format!("size plan has no tier for {p}")));
            }
        }
        if self.train.budget == 0 || self.train.max_epochs == 0 {
            return Err(Error::config("train.budget and train.max_epochs must be positive"));
        }
        if self.vocab_size == Some(0) {
            return Err(Error::config("vocab.size must be positive"));
        }
        if let Some(inc) = &self.increment {
            if self.kind != ModelKind::M2 {
                return Err(Error::config("incremental training needs model.kind = m2"));
            }
            if self.languages.contains(&inc.lang) {
                return Err(Error::config(format!("`{}` is already a model language", inc.lang)));
            }
            if !corpus_langs.contains(&inc.lang) {
                return Err(Error::config(format!("new language `{}` is not in the corpus languages", inc.lang)));
            }
            if inc.anchors.is_empty() {
                return Err(Error::config("increment.anchors is empty"));
            }
            if let Some(l) = inc.anchors.iter().chain(&inc.aux).find(|l| !self.languages.contains(l)) {
                return Err(Error::config(format!("anchor/aux language `{l}` is not a model language")));
            }
            if let Init::Donor(d) = &inc.init {
                if !self.languages.contains(d) {
                    return Err(Error::config(format!("donor `{d}` is not a model language")));
                }
            }
        }
        Ok(())
    }

    /// Languages present in the multi-parallel corpus.
    pub fn corpus_languages(&self) -> Vec<Lang> {
        match &self.data {
            DataSource::Synthetic(s) => s.languages.clone(),
            DataSource::Files(_) => {
                let mut v = self.languages.clone();
                if let Some(inc) = &self.increment {
                    v.push(inc.lang.clone());
                }
                v
            }
        }
    }

    pub fn num_parts(&self) -> usize {
        self.parts.unwrap_or_else(|| min_parts(self.corpus_languages().len()))
    }

    pub fn vocab_mode(&self) -> VocabMode {
        let size = self.vocab_size.unwrap_or(usize::MAX);
        match self.kind {
            ModelKind::OneToOne => VocabMode::Joint(size),
            _ => VocabMode::PerLanguage(size),
        }
    }

    /// Normalized `key=value` lines in key order.
    pub fn canonical(&self) -> String {
        self.raw.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical form; independent of key order and spacing.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    /// A copy with some keys replaced, revalidated.
    pub fn with(&self, changes: &[(&str, String)]) -> Result<Self> {
        let mut raw = self.raw.clone();
        for (k, v) in changes {
            if !KEYS.contains(k) {
                return Err(Error::config(format!("unknown key `{k}`")));
            }
            raw.insert(k.to_string(), v.clone());
        }
        let cfg = Self::from_pairs(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn raw(&self) -> &BTreeMap<String, String> {
        &self.raw
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "model.kind = m2\nmodel.languages = en de fi fr\nrun.seed = 3\n";

    fn parse(s: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(s, &Overrides::default())
    }

    #[test]
    fn digest_ignores_order_spacing_and_comments() {
        let a = parse(BASE).unwrap();
        let b = parse("# comment\nrun.seed=3\nmodel.languages =  en de   fi fr\n\nmodel.kind = m2 # trailing\n").unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = parse(&format!("{BASE}train.max_epochs = 2\n")).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn defaults_and_overrides() {
        let c = parse(BASE).unwrap();
        assert_eq!(c.kind, ModelKind::M2);
        assert_eq!(c.transformer, TransformerConfig::desk());
        assert_eq!(c.num_parts(), 3);
        assert!(c.probe);
        let o = Overrides { seed: Some(9), preset: Some("tiny".into()), ..Default::default() };
        let c = ExperimentConfig::parse(BASE, &o).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.transformer, TransformerConfig::tiny());
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            "model.languages = en de\n",
            "model.kind = m2\nmodel.languages = en de\nmodel.scheme = jm2m:fr\n",
            "model.kind = m2\nmodel.languages = en de\nbogus = 1\n",
            "model.kind = m2\nmodel.languages = en de\nrun.seed = 1\nrun.seed = 2\n",
            "model.kind = m2\nmodel.languages = en de\nsynth.languages = en fr\n",
            "model.kind = m2\nmodel.languages = en de fi fr\ndata.parts = 2\n",
            "model.kind = 1-1\nmodel.languages = en de fi\nincrement.lang = fr\nincrement.anchors = en\n",
            "model.kind = m2\nmodel.languages = en de\nsize.high = 10\nsize.tiers = en-fi:high\n",
            "model.kind = m2\nmodel.languages = en de\nmodel.heads = 3\n",
        ];
        for c in cases {
            let e = parse(c).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{c}: {e}");
        }
    }

    #[test]
    fn increment_and_size_sections() {
        let c = parse(
            "model.kind = m2\nmodel.languages = en de fi\nsynth.languages = en de fi fr\n\
             increment.lang = fr\nincrement.anchors = en\nincrement.aux = de\nincrement.init = donor:en\n\
             size.ratio = 1:2:4\nsize.high = 400\nsize.tiers = en-de:high de-en:high en-fi:medium de-fi:low\n",
        )
        .unwrap();
        let inc = c.increment.as_ref().unwrap();
        assert_eq!(inc.init, Init::Donor("en".parse().unwrap()));
        assert_eq!(inc.aux.len(), 1);
        let size = c.size.as_ref().unwrap();
        assert_eq!(size.ratio, [1, 2, 4]);
        assert_eq!(size.tiers.len(), 3);
        assert_eq!(c.num_parts(), 3);
    }

    #[test]
    fn with_revalidates() {
        let c = parse(BASE).unwrap();
        let d = c.with(&[("model.kind", "single".into())]).unwrap();
        assert_eq!(d.kind, ModelKind::Single);
        assert!(!d.probe);
        assert!(c.with(&[("model.scheme", "jm2m:xx".into())]).is_err());
    }
}
