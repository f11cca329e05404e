use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::Direction;
use crate::seed::rng_for;
use crate::zoo::ModelKind;

pub const DEFAULT_GRANULARITY: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ScheduleKind {
    /// One batch of every direction per step; smaller directions cycle.
    #[default]
    RoundRobin,
    /// Each step draws `granularity` sub-batches, directions weighted by data amount.
    Proportional { granularity: usize },
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "round_robin" || s == "roundrobin" => Ok(ScheduleKind::RoundRobin),
            None if s == "proportional" => Ok(ScheduleKind::Proportional { granularity: DEFAULT_GRANULARITY }),
            Some(("proportional", g)) => match g.parse() {
                Ok(granularity) if granularity > 0 => Ok(ScheduleKind::Proportional { granularity }),
                _ => Err(Error::config(format!("bad granularity `{g}`"))),
            },
            _ => Err(Error::config(format!("unknown schedule `{s}`"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::RoundRobin => f.write_str("round_robin"),
            ScheduleKind::Proportional { granularity } => write!(f, "proportional:{granularity}"),
        }
    }
}

/// Batches of one direction available in an epoch, with its training-set size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionLoad {
    pub direction: Direction,
    pub batches: usize,
    pub amount: usize,
}

/// One optimizer step: `(direction index, batch index)` pairs whose gradients are accumulated.
pub type StepPlan = Vec<(usize, usize)>;

/// Step plan of one epoch. Batch order inside each direction is shuffled per epoch.
pub fn schedule_epoch(loads: &[DirectionLoad], kind: ScheduleKind, seed: u64, epoch: usize) -> Result<Vec<StepPlan>> {
    if loads.is_empty() {
        return Err(Error::config("no directions to schedule"));
    }
    if let Some(l) = loads.iter().find(|l| l.batches == 0 || l.amount == 0) {
        return Err(Error::config(format!("direction {} has no training data", l.direction)));
    }
    let orders: Vec<Vec<usize>> = loads
        .iter()
        .map(|l| {
            let mut o: Vec<usize> = (0..l.batches).collect();
            o.shuffle(&mut rng_for(seed, &format!("data/order/{epoch}/{}", l.direction)));
            o
        })
        .collect();
    match kind {
        ScheduleKind::RoundRobin => {
            let steps = loads.iter().map(|l| l.batches).max().unwrap_or(0);
            Ok((0..steps).map(|s| orders.iter().enumerate().map(|(d, o)| (d, o[s % o.len()])).collect()).collect())
        }
        ScheduleKind::Proportional { granularity } => {
            if granularity == 0 {
                return Err(Error::config("granularity must be positive"));
            }
            let total: usize = loads.iter().map(|l| l.batches).sum();
            let steps = total.div_ceil(granularity);
            let weights =
                WeightedIndex::new(loads.iter().map(|l| l.amount as f64)).map_err(|e| Error::config(format!("sampling weights: {e}")))?;
            let mut rng = rng_for(seed, &format!("sampling/{epoch}"));
            let mut cursors = vec![0usize; loads.len()];
            Ok((0..steps)
                .map(|_| {
                    (0..granularity)
                        .map(|_| {
                            let d = weights.sample(&mut rng);
                            let b = orders[d][cursors[d] % orders[d].len()];
                            cursors[d] += 1;
                            (d, b)
                        })
                        .collect()
                })
                .collect())
        }
    }
}

/// Per-direction token budget from the step budget `budget`.
/// Single models get the whole budget, 1-1 splits it over directions, M2 over languages.
pub fn direction_budget(kind: ModelKind, budget: usize, directions: usize, languages: usize) -> usize {
    match kind {
        ModelKind::Single => budget,
        ModelKind::OneToOne => budget / directions.max(1),
        ModelKind::M2 => budget / languages.max(1),
    }
}

/// Sub-batch budget under `kind`: proportional steps spread the combined budget over `granularity` draws.
pub fn batch_budget(kind: ScheduleKind, per_direction: usize, directions: usize) -> usize {
    match kind {
        ScheduleKind::RoundRobin => per_direction,
        ScheduleKind::Proportional { granularity } => per_direction * directions / granularity.max(1),
    }
}
