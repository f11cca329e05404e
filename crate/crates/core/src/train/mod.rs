//! Multi-way training: scheduling, gradient accumulation across directions,
//! validation, early stopping, checkpoints, and metrics.

pub mod checkpoint;
mod metrics;
mod schedule;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{batch_by_tokens, Batch, Bitext};
use crate::error::{Error, Result};
use crate::lang::{Direction, Lang};
use crate::seed::rng_for;
use crate::tensor::{AdamConfig, AdamState, LrSchedule, ParamId, Tape};
use crate::transformer::ForwardCtx;
use crate::zoo::MultiModel;

pub use metrics::{EpochRecord, MetricsLog};
pub use schedule::{batch_budget, direction_budget, schedule_epoch, DirectionLoad, ScheduleKind, StepPlan, DEFAULT_GRANULARITY};

/// Encoded `(source ids, target ids)` examples of one direction.
pub type Examples = Vec<(Vec<u32>, Vec<u32>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionData {
    pub direction: Direction,
    pub train: Examples,
    pub valid: Examples,
}

/// Encoded training and validation data for every trained direction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainData {
    pub directions: Vec<DirectionData>,
}

impl TrainData {
    /// Encodes bitexts with the model's routing rules; `train` and `valid` are matched by direction.
    pub fn from_bitexts(model: &MultiModel, train: &[Bitext], valid: &[Bitext]) -> Result<Self> {
        let encode = |b: &Bitext| -> Result<Examples> {
            let (route, _) = model.route(&b.direction)?;
            Ok(b.src.iter().zip(&b.tgt).map(|(s, t)| (route.source_ids(s), route.target_ids(t))).collect())
        };
        let mut directions = Vec::with_capacity(train.len());
        for t in train {
            let v = valid
                .iter()
                .find(|v| v.direction == t.direction)
                .ok_or_else(|| Error::config(format!("no validation data for {}", t.direction)))?;
            directions.push(DirectionData { direction: t.direction.clone(), train: encode(t)?, valid: encode(v)? });
        }
        Ok(TrainData { directions })
    }

    /// Languages appearing on either side of the trained directions.
    pub fn languages(&self) -> Vec<Lang> {
        let mut out: Vec<Lang> = Vec::new();
        for d in &self.directions {
            for l in [&d.direction.src, &d.direction.tgt] {
                if !out.contains(l) {
                    out.push(l.clone());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Step token budget `B` before the per-kind split.
    pub budget: usize,
    pub schedule: ScheduleKind,
    pub max_epochs: usize,
    /// Stop after this many epochs without improvement.
    pub patience: Option<usize>,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Target tokens per validation batch.
    pub valid_batch_tokens: usize,
    /// Omit wall-clock figures from metrics so logs are byte-identical across runs.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            budget: 6144,
            schedule: ScheduleKind::RoundRobin,
            max_epochs: 100,
            patience: None,
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
            seed: 1,
            valid_batch_tokens: 4096,
            deterministic: true,
        }
    }
}

/// Per-batch outcome of one accumulated step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub direction: Direction,
    /// Summed token cross entropy.
    pub loss_sum: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub batches: Vec<BatchLoss>,
}

impl StepReport {
    pub fn tokens(&self) -> usize {
        self.batches.iter().map(|b| b.tokens).sum()
    }

    /// Mean token cross entropy over the whole step.
    pub fn loss(&self) -> f64 {
        self.batches.iter().map(|b| b.loss_sum).sum::<f64>() / self.tokens().max(1) as f64
    }
}

fn at_step(e: Error, d: &Direction, step: u64) -> Error {
    match e {
        Error::Numeric { location, detail } => Error::numeric(format!("direction {d}, step {step}, {location}"), detail),
        e => e,
    }
}

fn uses_dropout(model: &MultiModel) -> bool {
    let c = model.config();
    c.dropout > 0.0 || c.attention_dropout > 0.0 || c.activation_dropout > 0.0
}

/// Gradients of all `batches`, summed and normalized by the step's total target tokens.
pub fn accumulate_gradients(
    model: &MultiModel,
    batches: &[&Batch],
    seed: u64,
    step: u64,
) -> Result<(BTreeMap<ParamId, Vec<f64>>, Vec<BatchLoss>)> {
    let total: usize = batches.iter().map(|b| b.tokens).sum();
    if total == 0 {
        return Err(Error::contract("a training step needs at least one target token"));
    }
    let mut acc: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
    let mut losses = Vec::with_capacity(batches.len());
    for (i, b) in batches.iter().enumerate() {
        let d = &b.direction;
        let mut tape = Tape::with_params(model.params());
        let mut ctx =
            if uses_dropout(model) { ForwardCtx::train(rng_for(seed, &format!("dropout/{step}/{d}/{i}"))) } else { ForwardCtx::eval() };
        let (loss, tokens) = model.batch_loss(&mut tape, &mut ctx, b)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::numeric(format!("direction {d}, step {step}"), format!("training loss is {value}")));
        }
        let scaled = tape.scale(loss, 1.0 / total as f64);
        let grads = tape.backward(scaled).map_err(|e| at_step(e, d, step))?;
        for (id, g) in grads.into_params() {
            match acc.get_mut(&id) {
                Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                None => {
                    acc.insert(id, g);
                }
            }
        }
        losses.push(BatchLoss { direction: d.clone(), loss_sum: value, tokens });
    }
    Ok((acc, losses))
}

/// One optimizer step over the accumulated gradients of `batches`.
pub fn train_step(model: &mut MultiModel, adam: &mut AdamState, batches: &[&Batch], lr: f64, seed: u64, step: u64) -> Result<StepReport> {
    let (grads, losses) = accumulate_gradients(model, batches, seed, step)?;
    adam.update(model.params_mut(), &grads, lr)?;
    Ok(StepReport { step, lr, batches: losses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidReport {
    pub per_direction: Vec<(Direction, f64)>,
    /// Arithmetic mean of the per-direction losses.
    pub average: f64,
}

/// Evaluation-mode token cross entropy per direction.
pub fn validate(model: &MultiModel, sets: &[(Direction, Vec<Batch>)]) -> Result<ValidReport> {
    if sets.is_empty() {
        return Err(Error::config("no validation data"));
    }
    let mut per_direction = Vec::with_capacity(sets.len());
    for (d, batches) in sets {
        let (mut sum, mut tokens) = (0.0, 0usize);
        for b in batches {
            let mut tape = Tape::with_params(model.params());
            let (l, n) = model.batch_loss(&mut tape, &mut ForwardCtx::eval(), b)?;
            sum += tape.scalar(l);
            tokens += n;
        }
        let loss = sum / tokens.max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("validation of {d}"), format!("loss is {loss}")));
        }
        per_direction.push((d.clone(), loss));
    }
    let average = per_direction.iter().map(|(_, l)| l).sum::<f64>() / per_direction.len() as f64;
    Ok(ValidReport { per_direction, average })
}

/// Best-so-far tracking across epochs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best: Option<f64>,
    /// 1-based epoch of `best`.
    pub best_epoch: Option<usize>,
    pub since_best: usize,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub is_best: bool,
    pub stop: bool,
}

/// Records the averaged validation loss of 1-based `epoch`.
pub fn early_stop(state: &mut EarlyStopState, epoch: usize, loss: f64, max_epochs: usize, patience: Option<usize>) -> StopDecision {
    state.history.push(loss);
    let is_best = state.best.is_none_or(|b| loss < b);
    if is_best {
        state.best = Some(loss);
        state.best_epoch = Some(epoch);
        state.since_best = 0;
    } else {
        state.since_best += 1;
    }
    let stop = epoch >= max_epochs || patience.is_some_and(|p| state.since_best >= p);
    StopDecision { is_best, stop }
}

/// Everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub adam: AdamState,
    pub early: EarlyStopState,
    /// Summed loss and tokens per direction in the current epoch.
    pub epoch_stats: Vec<(Direction, f64, usize)>,
}

impl TrainState {
    pub fn new(adam: AdamConfig) -> Self {
        TrainState {
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
            adam: AdamState::new(adam),
            early: EarlyStopState::default(),
            epoch_stats: Vec::new(),
        }
    }
}

struct EpochPlan {
    epoch: usize,
    batches: Vec<Vec<Batch>>,
    steps: Vec<StepPlan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: Vec<(Direction, f64)>,
    pub valid: ValidReport,
    pub decision: StopDecision,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub best_epoch: Option<usize>,
    pub best_valid: Option<f64>,
    pub history: Vec<f64>,
}

/// Drives epochs of scheduled, accumulated steps over one model.
pub struct Trainer<'m> {
    model: &'m mut MultiModel,
    data: &'m TrainData,
    cfg: TrainConfig,
    state: TrainState,
    plan: Option<EpochPlan>,
    valid: Vec<(Direction, Vec<Batch>)>,
    best: Option<Vec<Vec<f64>>>,
    metrics: Option<MetricsLog>,
    checkpoint_dir: Option<PathBuf>,
    epoch_started: Option<Instant>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut MultiModel, data: &'m TrainData, cfg: TrainConfig) -> Result<Self> {
        let state = TrainState::new(cfg.adam);
        Self::resume(model, data, cfg, state)
    }

    pub fn resume(model: &'m mut MultiModel, data: &'m TrainData, cfg: TrainConfig, state: TrainState) -> Result<Self> {
        if data.directions.is_empty() {
            return Err(Error::config("no training directions"));
        }
        for d in &data.directions {
            model.route(&d.direction)?;
            if d.train.is_empty() || d.valid.is_empty() {
                return Err(Error::config(format!("direction {} has empty train or valid data", d.direction)));
            }
        }
        let valid = data
            .directions
            .iter()
            .map(|d| Ok((d.direction.clone(), batch_by_tokens(&d.valid, &d.direction, cfg.valid_batch_tokens.max(longest(&d.valid)))?)))
            .collect::<Result<_>>()?;
        Ok(Trainer { model, data, cfg, state, plan: None, valid, best: None, metrics: None, checkpoint_dir: None, epoch_started: None })
    }

    pub fn with_metrics(mut self, log: MetricsLog) -> Self {
        self.metrics = Some(log);
        self
    }

    /// Writes `last.ckpt` after every epoch and `best.ckpt` at each improvement.
    pub fn with_checkpoints(mut self, dir: PathBuf) -> Self {
        self.checkpoint_dir = Some(dir);
        self
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn model(&self) -> &MultiModel {
        self.model
    }

    /// Token budget of one batch of any direction under the configured schedule.
    pub fn batch_tokens(&self) -> usize {
        let n = self.data.directions.len();
        let per = direction_budget(self.model.kind(), self.cfg.budget, n, self.data.languages().len());
        batch_budget(self.cfg.schedule, per, n)
    }

    fn ensure_plan(&mut self) -> Result<()> {
        let epoch = self.state.epoch;
        if self.plan.as_ref().is_some_and(|p| p.epoch == epoch) {
            return Ok(());
        }
        let max_tokens = self.batch_tokens();
        let mut batches = Vec::with_capacity(self.data.directions.len());
        let mut loads = Vec::with_capacity(self.data.directions.len());
        for d in &self.data.directions {
            let need = longest(&d.train);
            if max_tokens < need {
                return Err(Error::config(format!(
                    "batch budget {max_tokens} for {} is below its longest target ({need}); raise the budget",
                    d.direction
                )));
            }
            let mut ex = d.train.clone();
            ex.shuffle(&mut rng_for(self.cfg.seed, &format!("data/shuffle/{epoch}/{}", d.direction)));
            let b = batch_by_tokens(&ex, &d.direction, max_tokens)?;
            loads.push(DirectionLoad { direction: d.direction.clone(), batches: b.len(), amount: d.train.len() });
            batches.push(b);
        }
        let steps = schedule_epoch(&loads, self.cfg.schedule, self.cfg.seed, epoch)?;
        self.plan = Some(EpochPlan { epoch, batches, steps });
        Ok(())
    }

    pub fn steps_in_epoch(&mut self) -> Result<usize> {
        self.ensure_plan()?;
        Ok(self.plan.as_ref().expect("plan").steps.len())
    }

    pub fn epoch_done(&mut self) -> Result<bool> {
        Ok(self.state.step_in_epoch >= self.steps_in_epoch()?)
    }

    /// Runs the next scheduled step of the current epoch.
    pub fn train_step(&mut self) -> Result<StepReport> {
        self.ensure_plan()?;
        if self.epoch_started.is_none() {
            self.epoch_started = Some(Instant::now());
        }
        let plan = self.plan.as_ref().expect("plan");
        let entries = plan.steps.get(self.state.step_in_epoch).ok_or_else(|| Error::contract("epoch already finished"))?;
        let batches: Vec<&Batch> = entries.iter().map(|&(d, b)| &plan.batches[d][b]).collect();
        let step = self.state.global_step + 1;
        let lr = self.cfg.lr.lr_at(step)?;
        let report = train_step(self.model, &mut self.state.adam, &batches, lr, self.cfg.seed, step)?;
        for b in &report.batches {
            match self.state.epoch_stats.iter_mut().find(|s| s.0 == b.direction) {
                Some(s) => {
                    s.1 += b.loss_sum;
                    s.2 += b.tokens;
                }
                None => self.state.epoch_stats.push((b.direction.clone(), b.loss_sum, b.tokens)),
            }
        }
        self.state.step_in_epoch += 1;
        self.state.global_step = step;
        Ok(report)
    }

    /// Validates, updates early stopping, logs, and checkpoints the finished epoch.
    pub fn finish_epoch(&mut self) -> Result<EpochReport> {
        let valid = validate(self.model, &self.valid)?;
        let epoch = self.state.epoch + 1;
        let decision = early_stop(&mut self.state.early, epoch, valid.average, self.cfg.max_epochs, self.cfg.patience);
        let mut stats = std::mem::take(&mut self.state.epoch_stats);
        stats.sort_by(|a, b| a.0.cmp(&b.0));
        let tokens: usize = stats.iter().map(|s| s.2).sum();
        let train_loss: Vec<(Direction, f64)> = stats.iter().map(|(d, l, n)| (d.clone(), l / (*n).max(1) as f64)).collect();
        if decision.is_best {
            self.best = Some(self.model.params().snapshot());
        }
        let lr = self.cfg.lr.lr_at(self.state.global_step.max(1))?;
        let elapsed = self.epoch_started.take().map(|t| t.elapsed().as_secs_f64());
        self.state.epoch = epoch;
        self.state.step_in_epoch = 0;
        if let Some(log) = &self.metrics {
            let tps = match (self.cfg.deterministic, elapsed) {
                (false, Some(s)) if s > 0.0 => Some(tokens as f64 / s),
                _ => None,
            };
            log.append(&EpochRecord::new(epoch, self.state.global_step, lr, &train_loss, &valid, decision.is_best, tokens, tps))?;
        }
        if let Some(dir) = &self.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            if decision.is_best {
                checkpoint::save(&dir.join("best.ckpt"), self.model, Some(&self.state))?;
            }
            checkpoint::save(&dir.join("last.ckpt"), self.model, Some(&self.state))?;
        }
        log::info!("epoch {epoch}: valid {:.4}{}", valid.average, if decision.is_best { " (best)" } else { "" });
        Ok(EpochReport { epoch, train_loss, valid, decision, tokens })
    }

    /// Runs `n` steps, finishing epochs as they complete.
    pub fn run_steps(&mut self, n: usize) -> Result<Vec<StepReport>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.epoch_done()? {
                self.finish_epoch()?;
                continue;
            }
            out.push(self.train_step()?);
        }
        Ok(out)
    }

    /// Trains until early stopping or `max_epochs`, then restores the best parameters.
    pub fn run(&mut self) -> Result<TrainSummary> {
        while self.state.epoch < self.cfg.max_epochs {
            while !self.epoch_done()? {
                self.train_step()?;
            }
            if self.finish_epoch()?.decision.stop {
                break;
            }
        }
        self.restore_best()?;
        Ok(TrainSummary {
            epochs: self.state.epoch,
            steps: self.state.global_step,
            best_epoch: self.state.early.best_epoch,
            best_valid: self.state.early.best,
            history: self.state.early.history.clone(),
        })
    }

    /// Loads the best-epoch parameters, from memory or from `best.ckpt`.
    pub fn restore_best(&mut self) -> Result<()> {
        if let Some(best) = &self.best {
            return self.model.params_mut().restore(best);
        }
        if let Some(dir) = &self.checkpoint_dir {
            let path = dir.join("best.ckpt");
            if path.exists() {
                let (m, _) = checkpoint::load(&path)?;
                self.model.params_mut().restore(&m.params().snapshot())?;
            }
        }
        Ok(())
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }
}

fn longest(ex: &Examples) -> usize {
    ex.iter().map(|(_, t)| t.len()).max().unwrap_or(0)
}

#[cfg(test)]
mod tests;
