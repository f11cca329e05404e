//! Decoding and scoring: beam search, corpus BLEU, pivoting, and direction matrices.

mod beam;
mod bleu;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{ideal_translate, Bitext, Sentence, SyntheticLanguageSpec};
use crate::error::{Error, Result};
use crate::lang::{Direction, Lang};
use crate::zoo::MultiModel;

pub use beam::{beam_search, DecodeConfig, Hypothesis, LengthPenalty};
pub use bleu::{corpus_bleu, token_accuracy, BleuStats};

/// Anything that maps a tokenized sentence from `d.src` to `d.tgt`.
pub trait Translate: Sync {
    fn translate(&self, d: &Direction, source: &[String]) -> Result<Sentence>;
}

/// Beam-search translation with a trained model.
#[derive(Debug, Clone, Copy)]
pub struct ModelTranslator<'a> {
    pub model: &'a MultiModel,
    pub decode: DecodeConfig,
}

impl Translate for ModelTranslator<'_> {
    fn translate(&self, d: &Direction, source: &[String]) -> Result<Sentence> {
        let (route, dec) = self.model.route(d)?;
        let h = beam_search(self.model, d, &route.source_ids(source), &self.decode)?;
        Ok(dec.tgt_vocab.decode(&h.tokens))
    }
}

/// Exact translator over synthetic languages.
#[derive(Debug, Clone)]
pub struct SynthOracle {
    pub specs: Vec<SyntheticLanguageSpec>,
}

impl SynthOracle {
    fn spec(&self, l: &Lang) -> Result<&SyntheticLanguageSpec> {
        self.specs.iter().find(|s| &s.lang == l).ok_or_else(|| Error::routing(format!("no synthetic spec for `{l}`")))
    }
}

impl Translate for SynthOracle {
    fn translate(&self, d: &Direction, source: &[String]) -> Result<Sentence> {
        ideal_translate(self.spec(&d.src)?, self.spec(&d.tgt)?, source)
    }
}

/// Worker threads for evaluation: `MODNET_THREADS`, else the available cores.
pub fn eval_threads() -> usize {
    std::env::var("MODNET_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Translates every sentence; results keep input order regardless of thread count.
pub fn translate_all(t: &dyn Translate, d: &Direction, sources: &[Sentence]) -> Result<Vec<Sentence>> {
    let threads = eval_threads().min(sources.len()).max(1);
    if threads == 1 {
        return sources.iter().map(|s| t.translate(d, s)).collect();
    }
    let chunk = sources.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = sources
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| t.translate(d, s)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(sources.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Translates through a pivot language with two legs.
pub fn pivot_translate(
    leg_a: &dyn Translate,
    dir_a: &Direction,
    leg_b: &dyn Translate,
    dir_b: &Direction,
    source: &[String],
) -> Result<Sentence> {
    if dir_a.tgt != dir_b.src {
        return Err(Error::Pivot(format!("legs {dir_a} and {dir_b} do not meet at one pivot")));
    }
    let mid = leg_a.translate(dir_a, source)?;
    if mid.is_empty() {
        return Err(Error::Pivot(format!("first leg {dir_a} produced an empty hypothesis")));
    }
    leg_b.translate(dir_b, &mid)
}

/// Pivot `src -> pivot -> tgt` over two translators.
pub struct PivotTranslator<'a> {
    pub pivot: Lang,
    pub leg_a: &'a dyn Translate,
    pub leg_b: &'a dyn Translate,
}

impl Translate for PivotTranslator<'_> {
    fn translate(&self, d: &Direction, source: &[String]) -> Result<Sentence> {
        let a = Direction::new(d.src.clone(), self.pivot.clone());
        let b = Direction::new(self.pivot.clone(), d.tgt.clone());
        pivot_translate(self.leg_a, &a, self.leg_b, &b, source)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub direction: Direction,
    pub bleu: f64,
    pub accuracy: f64,
    pub sentences: usize,
    pub supervised: bool,
    /// Sentences whose pivot first leg came back empty; they are scored as empty output.
    #[serde(default)]
    pub pivot_failures: usize,
}

/// Scores for a set of directions, in request order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TranslationMatrix {
    pub entries: Vec<MatrixEntry>,
}

#[derive(Serialize)]
struct MatrixRecord<'a> {
    direction: String,
    bleu: f64,
    accuracy: f64,
    sentences: usize,
    supervised: bool,
    pivot_failures: usize,
    seed: u64,
    label: &'a str,
}

impl TranslationMatrix {
    pub fn get(&self, d: &Direction) -> Option<&MatrixEntry> {
        self.entries.iter().find(|e| &e.direction == d)
    }

    pub fn mean_bleu(&self, filter: impl Fn(&MatrixEntry) -> bool) -> Option<f64> {
        let v: Vec<f64> = self.entries.iter().filter(|e| filter(e)).map(|e| e.bleu).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Source languages as rows, targets as columns; zero-shot cells are starred.
    pub fn to_table(&self) -> String {
        let mut langs: Vec<&Lang> = Vec::new();
        for e in &self.entries {
            for l in [&e.direction.src, &e.direction.tgt] {
                if !langs.contains(&l) {
                    langs.push(l);
                }
            }
        }
        let cell: BTreeMap<(&Lang, &Lang), &MatrixEntry> = self.entries.iter().map(|e| ((&e.direction.src, &e.direction.tgt), e)).collect();
        let mut s = format!("{:<8}", "src\\tgt");
        for l in &langs {
            write!(s, "{:>9}", l.as_str()).unwrap();
        }
        s.push('\n');
        for a in &langs {
            write!(s, "{:<8}", a.as_str()).unwrap();
            for b in &langs {
                match cell.get(&(*a, *b)) {
                    Some(e) => write!(s, "{:>8.2}{}", e.bleu, if e.supervised { ' ' } else { '*' }).unwrap(),
                    None => write!(s, "{:>9}", "-").unwrap(),
                }
            }
            s.push('\n');
        }
        s
    }

    /// One JSON object per direction.
    pub fn to_jsonl(&self, seed: u64, label: &str) -> String {
        self.entries
            .iter()
            .map(|e| {
                let r = MatrixRecord {
                    direction: e.direction.to_string(),
                    bleu: e.bleu,
                    accuracy: e.accuracy,
                    sentences: e.sentences,
                    supervised: e.supervised,
                    pivot_failures: e.pivot_failures,
                    seed,
                    label,
                };
                serde_json::to_string(&r).expect("plain record") + "\n"
            })
            .collect()
    }
}

/// Scores one direction against references.
///
/// A pivot error on one sentence scores that sentence as an empty hypothesis and is counted in
/// `pivot_failures`; every other error aborts.
pub fn evaluate_direction(t: &dyn Translate, test: &Bitext, supervised: bool) -> Result<MatrixEntry> {
    let tolerant = PivotTolerant { inner: t, failures: std::sync::atomic::AtomicUsize::new(0) };
    let hyps = translate_all(&tolerant, &test.direction, &test.src)?;
    let pivot_failures = tolerant.failures.into_inner();
    if pivot_failures > 0 {
        log::warn!("{}: {pivot_failures} of {} pivot translations failed and were scored as empty", test.direction, test.len());
    }
    Ok(MatrixEntry {
        direction: test.direction.clone(),
        bleu: corpus_bleu(&hyps, &test.tgt)?,
        accuracy: token_accuracy(&hyps, &test.tgt)?,
        sentences: test.len(),
        supervised,
        pivot_failures,
    })
}

struct PivotTolerant<'a> {
    inner: &'a dyn Translate,
    failures: std::sync::atomic::AtomicUsize,
}

impl Translate for PivotTolerant<'_> {
    fn translate(&self, d: &Direction, source: &[String]) -> Result<Sentence> {
        match self.inner.translate(d, source) {
            Err(Error::Pivot(_)) => {
                self.failures.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                Ok(Vec::new())
            }
            r => r,
        }
    }
}

/// BLEU and accuracy for every requested direction, flagging the supervised ones.
pub fn zero_shot_matrix(
    t: &dyn Translate,
    directions: &[Direction],
    tests: &[Bitext],
    supervised: &[Direction],
) -> Result<TranslationMatrix> {
    let mut entries = Vec::with_capacity(directions.len());
    for d in directions {
        let test = tests.iter().find(|b| &b.direction == d).ok_or_else(|| Error::config(format!("no test set for {d}")))?;
        entries.push(evaluate_direction(t, test, supervised.contains(d))?);
    }
    Ok(TranslationMatrix { entries })
}

#[cfg(test)]
mod tests;
