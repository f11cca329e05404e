use std::collections::HashMap;

use crate::error::{Error, Result};

/// Clipped n-gram statistics for n = 1..=4; additive across sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: AsRef<str>>(toks: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    for w in toks.windows(n) {
        *m.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
    }
    m
}

impl BleuStats {
    pub fn sentence<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> Self {
        let mut s = BleuStats { hyp_len: hyp.len(), ref_len: reference.len(), ..Default::default() };
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
            s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn add(&mut self, o: &BleuStats) {
        for n in 0..4 {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// `BP * exp(mean ln p_n)` on a 0..100 scale, zero when any precision is zero.
    pub fn bleu(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (0..4).map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln()).sum::<f64>() / 4.0;
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * log_p.exp()
    }
}

fn check_counts(h: usize, r: usize) -> Result<()> {
    if h != r {
        return Err(Error::contract(format!("{h} hypotheses for {r} references")));
    }
    if r == 0 {
        return Err(Error::contract("no references to score against"));
    }
    Ok(())
}

/// Token-level corpus BLEU from summed statistics.
pub fn corpus_bleu<T: AsRef<str>>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_counts(hyps.len(), refs.len())?;
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&BleuStats::sentence(h, r));
    }
    Ok(total.bleu())
}

/// Position-wise matches over the longer of each hypothesis/reference pair.
pub fn token_accuracy<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_counts(hyps.len(), refs.len())?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hit += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}
