use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::LangPair;
use crate::seed::rng_for;

use super::corpus::Segment;
use super::split::DataSplit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Low,
    Medium,
    High,
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Tier::Low),
            "medium" => Ok(Tier::Medium),
            "high" => Ok(Tier::High),
            _ => Err(Error::config(format!("unknown tier `{s}`"))),
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Low => "low",
            Tier::Medium => "medium",
            Tier::High => "high",
        })
    }
}

/// Per-pair data tiers with a low:medium:high ratio.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizePlan {
    pub tiers: BTreeMap<LangPair, Tier>,
    pub ratio: [u64; 3],
    pub high_amount: u64,
}

impl SizePlan {
    pub fn new(tiers: BTreeMap<LangPair, Tier>, ratio: [u64; 3], high_amount: u64) -> Result<Self> {
        if ratio.contains(&0) {
            return Err(Error::config("tier ratios must be positive"));
        }
        let plan = SizePlan { tiers, ratio, high_amount };
        for t in [Tier::Low, Tier::Medium, Tier::High] {
            plan.amount(t)?;
        }
        Ok(plan)
    }

    /// `high_amount * ratio[tier] / ratio[high]`; must be an integer.
    pub fn amount(&self, tier: Tier) -> Result<usize> {
        let r = self.ratio[tier as usize];
        let num = self.high_amount * r;
        let den = self.ratio[2];
        if !num.is_multiple_of(den) {
            return Err(Error::config(format!("{tier} amount {}*{r}/{den} is not an integer", self.high_amount)));
        }
        Ok((num / den) as usize)
    }

    pub fn amount_for(&self, pair: &LangPair) -> Result<usize> {
        let tier = self.tiers.get(pair).ok_or_else(|| Error::config(format!("size plan has no tier for {pair}")))?;
        self.amount(*tier)
    }
}

/// Truncates the training rows of every planned pair to its amount: seeded shuffle, then prefix.
/// Pairs without a tier keep all their rows.
pub fn apply_size_plan(split: &DataSplit, plan: &SizePlan, seed: u64) -> Result<DataSplit> {
    let mut out = split.clone();
    for pair in plan.tiers.keys() {
        let want = plan.amount_for(pair)?;
        let rows = split.rows(pair, Segment::Train)?;
        if want > rows.len() {
            return Err(Error::config(format!("{pair} needs {want} training rows but only {} are available", rows.len())));
        }
        let mut shuffled = rows.to_vec();
        shuffled.shuffle(&mut rng_for(seed, &format!("size_plan/{pair}")));
        shuffled.truncate(want);
        shuffled.sort_unstable();
        out.set_rows(pair, Segment::Train, shuffled);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{CorpusSegments, MultiParallelCorpus};
    use crate::data::split::split_nonsharing;
    use crate::lang::{all_pairs, parse_langs};

    fn plan(ratio: [u64; 3], high: u64) -> SizePlan {
        SizePlan::new(BTreeMap::new(), ratio, high).unwrap()
    }

    #[test]
    fn tier_amounts() {
        let p = plan([1, 2, 4], 500_000);
        assert_eq!(p.amount(Tier::Low).unwrap(), 125_000);
        assert_eq!(p.amount(Tier::Medium).unwrap(), 250_000);
        let p = plan([1, 5, 25], 500_000);
        assert_eq!(p.amount(Tier::Low).unwrap(), 20_000);
        assert_eq!(p.amount(Tier::Medium).unwrap(), 100_000);
        let p = plan([1, 1, 1], 700);
        assert_eq!(p.amount(Tier::Low).unwrap(), 700);
        assert!(SizePlan::new(BTreeMap::new(), [1, 2, 4], 10).is_err());
    }

    #[test]
    fn truncation_is_exact_and_seeded() {
        let langs = parse_langs("a b c d").unwrap();
        let mk = |n: usize| {
            let rows = (0..n).map(|r| langs.iter().map(|l| vec![format!("{l}{r}")]).collect()).collect();
            MultiParallelCorpus::new(langs.clone(), rows).unwrap()
        };
        let seg = CorpusSegments { train: mk(120), valid: mk(9), test: mk(9) };
        let split = split_nonsharing(&seg, 3).unwrap();
        let tiers: Vec<Tier> = vec![Tier::Low, Tier::Medium, Tier::High, Tier::High, Tier::Low, Tier::Medium];
        let tiers = all_pairs(&langs).into_iter().zip(tiers).collect();
        let sp = SizePlan::new(tiers, [1, 2, 4], 40).unwrap();
        let a = apply_size_plan(&split, &sp, 7).unwrap();
        let b = apply_size_plan(&split, &sp, 7).unwrap();
        assert_eq!(a, b);
        for pair in split.pairs() {
            let got = a.rows(&pair, Segment::Train).unwrap();
            assert_eq!(got.len(), sp.amount_for(&pair).unwrap());
            let full = split.rows(&pair, Segment::Train).unwrap();
            assert!(got.iter().all(|r| full.contains(r)));
            assert_eq!(a.rows(&pair, Segment::Valid).unwrap(), split.rows(&pair, Segment::Valid).unwrap());
        }
        let too_big = SizePlan::new(sp.tiers.clone(), [1, 2, 4], 80).unwrap();
        assert!(apply_size_plan(&split, &too_big, 7).is_err());
    }
}
