use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::lang::Direction;
use crate::tensor::{log_sum_exp, Tensor};
use crate::transformer::PaddedBatch;
use crate::zoo::MultiModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthPenalty {
    /// `score / len^alpha`.
    Fairseq,
    /// `score / ((5 + len) / 6)^alpha`.
    Gnmt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub alpha: f64,
    pub penalty: LengthPenalty,
    /// Output cap including EOS; `None` means `2 * source length + 8`.
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_size: 4, alpha: 0.6, penalty: LengthPenalty::Fairseq, max_len: None }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::config("beam size must be at least 1"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("length penalty must be non-negative"));
        }
        if self.max_len == Some(0) {
            return Err(Error::config("max decode length must be positive"));
        }
        Ok(())
    }

    /// Length-normalized score of a finished hypothesis of `len` tokens (EOS included).
    pub fn score(&self, log_prob: f64, len: usize) -> f64 {
        let l = len as f64;
        match self.penalty {
            LengthPenalty::Fairseq => log_prob / l.powf(self.alpha),
            LengthPenalty::Gnmt => log_prob / ((5.0 + l) / 6.0).powf(self.alpha),
        }
    }
}

/// A finished hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Output ids without BOS and EOS.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub score: f64,
    /// Step at which EOS was emitted.
    pub finished_at: usize,
    /// EOS was forced by the length cap.
    pub forced_eos: bool,
}

/// Descending score, then earlier completion, then lexicographic ids.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then(a.finished_at.cmp(&b.finished_at)).then_with(|| a.tokens.cmp(&b.tokens))
}

fn repeat_memory(memory: &Tensor, copies: usize) -> Tensor {
    let mut v = Vec::with_capacity(memory.len() * copies);
    for _ in 0..copies {
        v.extend_from_slice(memory.values());
    }
    Tensor::new(vec![memory.rows() * copies, memory.cols()], v).expect("finite encoder states")
}

/// Beam search over the routed decoder.
pub fn beam_search(model: &MultiModel, d: &Direction, source: &[u32], cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::contract("cannot decode an empty source"));
    }
    let src = PaddedBatch::from_sequences(&[source.to_vec()], PAD);
    let memory = model.encode(d, &src)?;
    let best = search(model, d, &memory, source.len(), cfg.beam_size, cfg)?;
    if cfg.beam_size == 1 {
        return Ok(best);
    }
    // the greedy path stays a candidate so a wider beam never scores below it
    let greedy = search(model, d, &memory, source.len(), 1, cfg)?;
    Ok(if rank(&greedy, &best) == Ordering::Less { greedy } else { best })
}

fn search(model: &MultiModel, d: &Direction, memory: &Tensor, src_len: usize, beam: usize, cfg: &DecodeConfig) -> Result<Hypothesis> {
    let (_, dec) = model.route(d)?;
    let vocab = dec.tgt_vocab;
    let max_len = cfg.max_len.unwrap_or(2 * src_len + 8).min(model.config().max_positions);
    let blocked: Vec<bool> =
        (0..vocab.len() as u32).map(|id| id == PAD || id == BOS || (vocab.is_reserved(id) && id != EOS && id != UNK)).collect();
    let mut live: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut mem = repeat_memory(memory, 1);
    for t in 0..max_len {
        if mem.rows() != src_len * live.len() {
            mem = repeat_memory(memory, live.len());
        }
        let prefixes: Vec<Vec<u32>> = live.iter().map(|(p, _)| p.clone()).collect();
        let logits = model.next_token_logits(d, &mem, &vec![src_len; live.len()], &prefixes)?;
        let last = t + 1 == max_len;
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (b, row) in logits.iter().enumerate() {
            let lse = log_sum_exp(row);
            for (id, &z) in row.iter().enumerate() {
                let id = id as u32;
                if blocked[id as usize] || (last && id != EOS) {
                    continue;
                }
                cands.push((live[b].1 + z - lse, b, id));
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next = Vec::with_capacity(beam);
        for (rank, &(lp, b, id)) in cands.iter().enumerate() {
            if id == EOS {
                if rank < beam {
                    let tokens = live[b].0[1..].to_vec();
                    finished.push(Hypothesis {
                        score: cfg.score(lp, tokens.len() + 1),
                        tokens,
                        log_prob: lp,
                        finished_at: t,
                        forced_eos: last,
                    });
                }
            } else if next.len() < beam {
                let mut p = live[b].0.clone();
                p.push(id);
                next.push((p, lp));
            }
            if next.len() >= beam && rank + 1 >= beam {
                break;
            }
        }
        live = next;
        if finished.len() >= beam || live.is_empty() {
            break;
        }
    }
    finished.sort_by(rank);
    finished.into_iter().next().ok_or_else(|| Error::contract("beam search produced no hypothesis"))
}
