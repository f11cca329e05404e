use crate::error::{Error, Result};
use crate::lang::Direction;
use crate::transformer::PaddedBatch;

use super::vocab::{BOS, PAD};

/// Padded training batch of one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub direction: Direction,
    pub src: PaddedBatch,
    /// Targets ending in EOS.
    pub tgt: PaddedBatch,
    /// BOS followed by the target shifted right.
    pub dec_in: PaddedBatch,
    /// Example indices into the packed slice.
    pub rows: Vec<usize>,
    /// Non-pad target tokens.
    pub tokens: usize,
}

impl Batch {
    pub fn new(direction: Direction, examples: &[(Vec<u32>, Vec<u32>)], rows: Vec<usize>) -> Self {
        let src: Vec<Vec<u32>> = rows.iter().map(|&r| examples[r].0.clone()).collect();
        let tgt: Vec<Vec<u32>> = rows.iter().map(|&r| examples[r].1.clone()).collect();
        let dec_in: Vec<Vec<u32>> = tgt.iter().map(|t| std::iter::once(BOS).chain(t[..t.len() - 1].iter().copied()).collect()).collect();
        let tokens = tgt.iter().map(Vec::len).sum();
        Batch {
            direction,
            src: PaddedBatch::from_sequences(&src, PAD),
            tgt: PaddedBatch::from_sequences(&tgt, PAD),
            dec_in: PaddedBatch::from_sequences(&dec_in, PAD),
            rows,
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Greedy packing of length-sorted examples so no batch exceeds `max_tokens` target tokens.
pub fn batch_by_tokens(examples: &[(Vec<u32>, Vec<u32>)], direction: &Direction, max_tokens: usize) -> Result<Vec<Batch>> {
    if let Some((i, _)) = examples.iter().enumerate().find(|(_, (s, t))| s.is_empty() || t.is_empty()) {
        return Err(Error::contract(format!("example {i} of {direction} is empty")));
    }
    let longest = examples.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
    if max_tokens < longest.max(1) {
        return Err(Error::contract(format!("max_tokens {max_tokens} is below the longest target ({longest}) of {direction}")));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].1.len(), examples[i].0.len(), i));
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for i in order {
        let n = examples[i].1.len();
        if used + n > max_tokens && !cur.is_empty() {
            out.push(Batch::new(direction.clone(), examples, std::mem::take(&mut cur)));
            used = 0;
        }
        cur.push(i);
        used += n;
    }
    if !cur.is_empty() {
        out.push(Batch::new(direction.clone(), examples, cur));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dir() -> Direction {
        "a-b".parse().unwrap()
    }

    #[test]
    fn budget_of_one_sentence_gives_singletons() {
        let ex: Vec<_> = (0..5).map(|i| (vec![5, 6, i], vec![7, 8, 2])).collect();
        let b = batch_by_tokens(&ex, &dir(), 3).unwrap();
        assert_eq!(b.len(), 5);
        assert!(b.iter().all(|x| x.len() == 1 && x.tokens == 3));
        assert!(batch_by_tokens(&ex, &dir(), 2).is_err());
    }

    #[test]
    fn decoder_input_is_shifted() {
        let ex = vec![(vec![1, 9, 2], vec![7, 8, 2]), (vec![1, 9, 9, 2], vec![7, 2])];
        let b = &batch_by_tokens(&ex, &dir(), 100).unwrap()[0];
        assert_eq!(b.rows, vec![1, 0]);
        assert_eq!(b.dec_in.row(1), &[BOS, 7, 8]);
        assert_eq!(b.dec_in.row(0), &[BOS, 7]);
        assert_eq!(b.dec_in.ids[2], PAD);
        assert_eq!(b.tgt.lengths, vec![2, 3]);
        assert_eq!(b.tokens, 5);
    }

    proptest! {
        #[test]
        fn batches_partition_rows(lens in proptest::collection::vec((1usize..8, 1usize..8), 1..60), budget in 8usize..40) {
            let ex: Vec<_> = lens.iter().map(|&(s, t)| (vec![4; s], vec![5; t])).collect();
            let batches = batch_by_tokens(&ex, &dir(), budget).unwrap();
            let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.rows.clone()).collect();
            seen.sort();
            prop_assert_eq!(seen, (0..ex.len()).collect::<Vec<_>>());
            prop_assert!(batches.iter().all(|b| b.tokens <= budget));
            let total: usize = lens.iter().map(|l| l.1).sum();
            prop_assert_eq!(batches.iter().map(|b| b.tokens).sum::<usize>(), total);
        }
    }
}
