use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::Lang;
use crate::seed::rng_for;

use super::corpus::{CorpusSegments, MultiParallelCorpus, Sentence};

/// Length-preserving word-order rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reorder {
    Identity,
    Reverse,
    /// Left rotation by `k` positions (mod length).
    Rotate(usize),
    /// Swaps positions (0,1), (2,3), ...
    SwapAdjacent,
}

impl Reorder {
    pub fn apply<T: Clone>(&self, xs: &[T]) -> Vec<T> {
        let mut v = xs.to_vec();
        match *self {
            Reorder::Identity => {}
            Reorder::Reverse => v.reverse(),
            Reorder::Rotate(k) if !v.is_empty() => {
                let n = v.len();
                v.rotate_left(k % n)
            }
            Reorder::Rotate(_) => {}
            Reorder::SwapAdjacent => v.chunks_exact_mut(2).for_each(|c| c.swap(0, 1)),
        }
        v
    }

    pub fn invert<T: Clone>(&self, xs: &[T]) -> Vec<T> {
        match *self {
            Reorder::Rotate(k) if !xs.is_empty() => {
                let mut v = xs.to_vec();
                let n = v.len();
                v.rotate_right(k % n);
                v
            }
            _ => self.apply(xs),
        }
    }
}

impl fmt::Display for Reorder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reorder::Identity => f.write_str("identity"),
            Reorder::Reverse => f.write_str("reverse"),
            Reorder::Rotate(k) => write!(f, "rotate{k}"),
            Reorder::SwapAdjacent => f.write_str("swap"),
        }
    }
}

impl FromStr for Reorder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Reorder::Identity),
            "reverse" => Ok(Reorder::Reverse),
            "swap" | "swap_adjacent" => Ok(Reorder::SwapAdjacent),
            _ => s
                .strip_prefix("rotate")
                .and_then(|k| k.parse().ok())
                .map(Reorder::Rotate)
                .ok_or_else(|| Error::config(format!("unknown reorder rule `{s}`"))),
        }
    }
}

/// A synthetic language: concept `c` is written `{lang}_{permutation[c]}`, then reordered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticLanguageSpec {
    pub lang: Lang,
    pub permutation: Vec<u32>,
    pub reorder: Reorder,
}

impl SyntheticLanguageSpec {
    pub fn new(lang: Lang, permutation: Vec<u32>, reorder: Reorder) -> Result<Self> {
        let mut seen = vec![false; permutation.len()];
        for &p in &permutation {
            match seen.get_mut(p as usize) {
                Some(s) if !*s => *s = true,
                _ => return Err(Error::config(format!("permutation for `{lang}` is not a bijection"))),
            }
        }
        Ok(SyntheticLanguageSpec { lang, permutation, reorder })
    }

    pub fn identity(lang: Lang, concepts: usize) -> Self {
        SyntheticLanguageSpec { lang, permutation: (0..concepts as u32).collect(), reorder: Reorder::Identity }
    }

    /// Spec with a seeded random permutation.
    pub fn random(lang: Lang, concepts: usize, reorder: Reorder, seed: u64) -> Self {
        let mut permutation: Vec<u32> = (0..concepts as u32).collect();
        permutation.shuffle(&mut rng_for(seed, &format!("synth/perm/{lang}")));
        SyntheticLanguageSpec { lang, permutation, reorder }
    }

    pub fn concepts(&self) -> usize {
        self.permutation.len()
    }

    pub fn word(&self, concept: u32) -> String {
        format!("{}_{}", self.lang, self.permutation[concept as usize])
    }

    pub fn render(&self, concepts: &[u32]) -> Sentence {
        self.reorder.apply(concepts).into_iter().map(|c| self.word(c)).collect()
    }

    pub fn unrender(&self, sentence: &[String]) -> Result<Vec<u32>> {
        let inverse: HashMap<u32, u32> = self.permutation.iter().enumerate().map(|(c, &p)| (p, c as u32)).collect();
        let prefix = format!("{}_", self.lang);
        let ids = sentence
            .iter()
            .map(|w| {
                w.strip_prefix(&prefix)
                    .and_then(|i| i.parse::<u32>().ok())
                    .and_then(|i| inverse.get(&i).copied())
                    .ok_or_else(|| Error::contract(format!("`{w}` is not a word of `{}`", self.lang)))
            })
            .collect::<Result<Vec<u32>>>()?;
        Ok(self.reorder.invert(&ids))
    }
}

/// Exact translation between two synthetic languages.
pub fn ideal_translate(src: &SyntheticLanguageSpec, tgt: &SyntheticLanguageSpec, sentence: &[String]) -> Result<Sentence> {
    let concepts = src.unrender(sentence)?;
    if concepts.iter().any(|&c| c as usize >= tgt.concepts()) {
        return Err(Error::contract("concept outside the target inventory"));
    }
    Ok(tgt.render(&concepts))
}

/// Generation parameters; concepts are drawn from a Zipf law over the inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub rows: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub concepts: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { rows: 5000, min_len: 4, max_len: 12, concepts: 200, zipf_exponent: 1.0, seed: 1 }
    }
}

/// Reorder rules assigned round-robin to generated languages.
pub const DEFAULT_REORDERS: [Reorder; 6] =
    [Reorder::Identity, Reorder::Reverse, Reorder::Rotate(1), Reorder::SwapAdjacent, Reorder::Rotate(2), Reorder::Reverse];

pub fn default_specs(langs: &[Lang], concepts: usize, seed: u64) -> Vec<SyntheticLanguageSpec> {
    langs
        .iter()
        .enumerate()
        .map(|(i, l)| SyntheticLanguageSpec::random(l.clone(), concepts, DEFAULT_REORDERS[i % DEFAULT_REORDERS.len()], seed))
        .collect()
}

fn concept_sentences(cfg: &SynthConfig, rows: usize, stream: &str) -> Result<Vec<Vec<u32>>> {
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::config(format!("bad length range {}..={}", cfg.min_len, cfg.max_len)));
    }
    if cfg.concepts == 0 {
        return Err(Error::config("concept inventory is empty"));
    }
    let weights: Vec<f64> = (0..cfg.concepts).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf_exponent)).collect();
    let zipf = WeightedIndex::new(&weights).map_err(|e| Error::config(format!("zipf weights: {e}")))?;
    let mut rng = rng_for(cfg.seed, stream);
    Ok((0..rows)
        .map(|_| {
            let n = rng.gen_range(cfg.min_len..=cfg.max_len);
            (0..n).map(|_| zipf.sample(&mut rng) as u32).collect()
        })
        .collect())
}

fn render_all(specs: &[SyntheticLanguageSpec], sents: Vec<Vec<u32>>) -> Result<MultiParallelCorpus> {
    let rows = sents.iter().map(|c| specs.iter().map(|s| s.render(c)).collect()).collect();
    MultiParallelCorpus::new(specs.iter().map(|s| s.lang.clone()).collect(), rows)
}

fn check_specs(specs: &[SyntheticLanguageSpec], cfg: &SynthConfig) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::config("no synthetic languages given"));
    }
    if let Some(s) = specs.iter().find(|s| s.concepts() != cfg.concepts) {
        return Err(Error::config(format!("`{}` covers {} concepts, expected {}", s.lang, s.concepts(), cfg.concepts)));
    }
    Ok(())
}

/// Multi-parallel corpus of `cfg.rows` concept sentences rendered in every language.
pub fn synth_generate(specs: &[SyntheticLanguageSpec], cfg: &SynthConfig) -> Result<MultiParallelCorpus> {
    check_specs(specs, cfg)?;
    render_all(specs, concept_sentences(cfg, cfg.rows, "synth/rows")?)
}

/// Independent train/valid/test corpora from separate sampling streams.
pub fn synth_segments(specs: &[SyntheticLanguageSpec], cfg: &SynthConfig, valid: usize, test: usize) -> Result<CorpusSegments> {
    check_specs(specs, cfg)?;
    Ok(CorpusSegments {
        train: render_all(specs, concept_sentences(cfg, cfg.rows, "synth/train")?)?,
        valid: render_all(specs, concept_sentences(cfg, valid, "synth/valid")?)?,
        test: render_all(specs, concept_sentences(cfg, test, "synth/test")?)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse_langs;

    #[test]
    fn reorders_are_bijective() {
        let rules = [Reorder::Identity, Reorder::Reverse, Reorder::Rotate(3), Reorder::SwapAdjacent];
        for n in 0..9 {
            let xs: Vec<usize> = (0..n).collect();
            for r in rules {
                assert_eq!(r.invert(&r.apply(&xs)), xs, "{r} len {n}");
            }
        }
        assert_eq!(Reorder::Rotate(1).apply(&[1, 2, 3]), vec![2, 3, 1]);
        assert_eq!(Reorder::SwapAdjacent.apply(&[1, 2, 3]), vec![2, 1, 3]);
        assert_eq!("rotate2".parse::<Reorder>().unwrap(), Reorder::Rotate(2));
    }

    #[test]
    fn identity_spec_renders_concepts() {
        let s = SyntheticLanguageSpec::identity(Lang::new("x").unwrap(), 10);
        assert_eq!(s.render(&[3, 1, 4]), vec!["x_3", "x_1", "x_4"]);
        assert!(SyntheticLanguageSpec::new(Lang::new("x").unwrap(), vec![0, 0], Reorder::Identity).is_err());
    }

    #[test]
    fn render_round_trip_and_composition_oracle() {
        let langs = parse_langs("aa bb cc dd").unwrap();
        let cfg = SynthConfig { rows: 1000, concepts: 50, ..Default::default() };
        let specs = default_specs(&langs, cfg.concepts, 3);
        let c = synth_generate(&specs, &cfg).unwrap();
        assert_eq!(c.len(), 1000);
        for r in 0..c.len() {
            let concepts = specs[0].unrender(c.sentence(r, 0)).unwrap();
            assert!((4..=12).contains(&concepts.len()));
            for (j, s) in specs.iter().enumerate() {
                assert_eq!(&s.render(&s.unrender(c.sentence(r, j)).unwrap()), c.sentence(r, j));
                // independent oracle: map every concept word by hand, then reorder
                let by_hand: Vec<String> =
                    s.reorder.apply(&concepts).iter().map(|&k| format!("{}_{}", s.lang, s.permutation[k as usize])).collect();
                assert_eq!(&by_hand, c.sentence(r, j));
                assert_eq!(&ideal_translate(&specs[1], s, c.sentence(r, 1)).unwrap(), c.sentence(r, j));
            }
        }
        assert_eq!(synth_generate(&specs, &cfg).unwrap(), c);
    }

    #[test]
    fn zipf_favours_low_ranks() {
        let cfg = SynthConfig { rows: 500, concepts: 100, ..Default::default() };
        let sents = concept_sentences(&cfg, cfg.rows, "t").unwrap();
        let mut counts = vec![0usize; 100];
        sents.iter().flatten().for_each(|&c| counts[c as usize] += 1);
        assert!(counts[0] > 5 * counts[50].max(1));
        assert!(concept_sentences(&SynthConfig { min_len: 0, ..cfg }, 1, "t").is_err());
    }
}
