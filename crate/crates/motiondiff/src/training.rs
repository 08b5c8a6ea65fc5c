//! The optimization loop: batching, the warmup-then-decay learning-rate
//! schedule, classifier-free style dropout, Adam updates on the `f32` grid,
//! and checkpoint emission.
//!
//! Every random draw is keyed by `(seed, step[, item])` substreams, and
//! parameters plus optimizer moments are snapped to `f32` after each update,
//! so a run interrupted at any checkpoint resumes bit-identically.

use crate::checkpoint::{round_vec_to_f32, AdamMoments, Checkpoint};
use crate::data::ConditioningSequence;
use crate::denoiser::Denoiser;
use crate::diffusion::{draw_loss_noise, forward_sample, TrainingWeighting};
use crate::error::{Error, Result};
use crate::motion::MotionMeta;
use crate::rng;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimization hyperparameters. Defaults follow the reference recipe:
/// peak rate 1e-4 after 10k linear warmup steps, multiplied by
/// `1 - 0.5e-5` every 10 steps thereafter, with style dropout 0.2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub warmup_steps: u64,
    pub decay_factor: f64,
    pub decay_interval: u64,
    pub style_dropout: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            warmup_steps: 10_000,
            decay_factor: 0.5e-5,
            decay_interval: 10,
            style_dropout: 0.2,
            batch_size: 16,
            total_steps: 100_000,
            checkpoint_interval: 10_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::config("lr_max must be positive and finite"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::config("decay_factor must lie in (0, 1)"));
        }
        if self.warmup_steps == 0 || self.decay_interval == 0 {
            return Err(Error::config(
                "warmup_steps and decay_interval must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.style_dropout) {
            return Err(Error::config("style_dropout must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::config("checkpoint_interval must be positive"));
        }
        Ok(())
    }
}

/// Learning rate at a 1-based update counter: linear warmup to `lr_max`
/// over `warmup_steps`, then `lr_max * (1 - decay_factor)^k` where `k`
/// advances once per `decay_interval` steps past the warmup boundary.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        cfg.lr_max * (step as f64 / cfg.warmup_steps as f64)
    } else {
        let intervals = (step - cfg.warmup_steps) / cfg.decay_interval;
        let exponent = intervals.min(i32::MAX as u64) as i32;
        cfg.lr_max * (1.0 - cfg.decay_factor).powi(exponent)
    }
}

/// Zeroes the style span of each sequence independently with probability
/// `p` (the unconditional sentinel), leaving audio channels untouched.
/// Draws one uniform variate per sequence regardless of outcome so the
/// caller's stream position is deterministic. Returns how many sequences
/// were dropped.
pub fn apply_style_dropout<R: Rng>(
    batch: &mut [ConditioningSequence],
    p: f64,
    rng: &mut R,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!(
            "dropout probability {p} outside [0, 1]"
        )));
    }
    let mut dropped = 0;
    for cond in batch.iter_mut() {
        let u: f64 = rng.gen();
        if u < p {
            *cond = cond.with_zero_style();
            dropped += 1;
        }
    }
    Ok(dropped)
}

/// One training pair: a clean pose window and its conditioning.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub x0: Array2<f64>,
    pub cond: ConditioningSequence,
}

/// A validated, nonempty collection of training pairs with consistent
/// widths.
#[derive(Debug, Clone)]
pub struct Dataset {
    examples: Vec<TrainingExample>,
    input_dim: usize,
    cond_dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<TrainingExample>) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Data("training dataset is empty".into()))?;
        let input_dim = first.x0.ncols();
        let cond_dim = first.cond.frames.ncols();
        for (i, ex) in examples.iter().enumerate() {
            if ex.x0.ncols() != input_dim || ex.cond.frames.ncols() != cond_dim {
                return Err(Error::Data(format!(
                    "example {i} has widths ({}, {}), expected ({input_dim}, {cond_dim})",
                    ex.x0.ncols(),
                    ex.cond.frames.ncols()
                )));
            }
            if ex.cond.len() != ex.x0.nrows() {
                return Err(Error::Data(format!(
                    "example {i}: {} conditioning frames for {} pose frames",
                    ex.cond.len(),
                    ex.x0.nrows()
                )));
            }
            if !ex.x0.iter().all(|v| v.is_finite()) {
                return Err(Error::Data(format!("example {i} has non-finite poses")));
            }
        }
        Ok(Self {
            examples,
            input_dim,
            cond_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[TrainingExample] {
        &self.examples
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }
}

/// Telemetry for one completed update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Owns the parameters and optimizer state between updates.
#[derive(Debug, Clone)]
pub struct Trainer {
    net: Denoiser,
    schedule_cfg: ScheduleConfig,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    weighting: TrainingWeighting,
    params: Vec<f64>,
    moments: AdamMoments,
    step: u64,
    norm_stats: BTreeMap<String, Vec<f64>>,
    style_labels: Vec<String>,
    motion_meta: Option<MotionMeta>,
}

impl Trainer {
    /// Fresh state: seeded initialization snapped to the `f32` grid, zero
    /// moments, step counter zero.
    pub fn new(net: Denoiser, schedule_cfg: ScheduleConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sched = schedule_cfg.build()?;
        let weighting = TrainingWeighting::uniform(sched.n_steps);
        let mut params = net.init_params(cfg.seed);
        round_vec_to_f32(&mut params);
        let n = params.len();
        Ok(Self {
            net,
            schedule_cfg,
            sched,
            cfg,
            weighting,
            params,
            moments: AdamMoments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
            step: 0,
            norm_stats: BTreeMap::new(),
            style_labels: Vec::new(),
            motion_meta: None,
        })
    }

    /// Restores a snapshot; the next update continues the interrupted
    /// run bit-for-bit.
    pub fn resume(checkpoint: Checkpoint) -> Result<Self> {
        checkpoint.train.validate()?;
        let net = Denoiser::new(checkpoint.denoiser.clone())?;
        if checkpoint.params.len() != net.param_count() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, config needs {}",
                checkpoint.params.len(),
                net.param_count()
            )));
        }
        let sched = checkpoint.schedule.build()?;
        let weighting = TrainingWeighting::uniform(sched.n_steps);
        let n = checkpoint.params.len();
        let moments = match checkpoint.moments {
            Some(m) => {
                if m.m.len() != n || m.v.len() != n {
                    return Err(Error::Checkpoint(
                        "optimizer moments do not match parameter count".into(),
                    ));
                }
                m
            }
            None => AdamMoments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        };
        Ok(Self {
            net,
            schedule_cfg: checkpoint.schedule,
            sched,
            cfg: checkpoint.train,
            weighting,
            params: checkpoint.params,
            moments,
            step: checkpoint.step,
            norm_stats: checkpoint.norm_stats,
            style_labels: checkpoint.style_labels,
            motion_meta: checkpoint.motion_meta,
        })
    }

    /// Attaches feature-normalization statistics, style labels, and optional
    /// motion metadata so they travel with every checkpoint.
    pub fn set_metadata(
        &mut self,
        norm_stats: BTreeMap<String, Vec<f64>>,
        style_labels: Vec<String>,
        motion_meta: Option<MotionMeta>,
    ) {
        self.norm_stats = norm_stats;
        self.style_labels = style_labels;
        self.motion_meta = motion_meta;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn net(&self) -> &Denoiser {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            denoiser: self.net.config.clone(),
            schedule: self.schedule_cfg.clone(),
            train: self.cfg.clone(),
            norm_stats: self.norm_stats.clone(),
            style_labels: self.style_labels.clone(),
            motion_meta: self.motion_meta.clone(),
            params: self.params.clone(),
            moments: Some(self.moments.clone()),
        }
    }

    /// Assembles the batch for a given 1-based step: uniform example
    /// selection followed by style dropout, both from the step's stream.
    fn assemble_batch(
        &self,
        dataset: &Dataset,
        step: u64,
    ) -> Result<Vec<(Array2<f64>, ConditioningSequence)>> {
        let mut stream = rng::step_stream(self.cfg.seed, step);
        let mut batch: Vec<(Array2<f64>, ConditioningSequence)> = (0..self.cfg.batch_size)
            .map(|_| {
                let idx = stream.gen_range(0..dataset.len());
                let ex = &dataset.examples()[idx];
                (ex.x0.clone(), ex.cond.clone())
            })
            .collect();
        let mut conds: Vec<ConditioningSequence> =
            batch.iter().map(|(_, c)| c.clone()).collect();
        apply_style_dropout(&mut conds, self.cfg.style_dropout, &mut stream)?;
        for ((_, slot), cond) in batch.iter_mut().zip(conds) {
            *slot = cond;
        }
        Ok(batch)
    }

    /// Runs one update: sample batch, draw per-item diffusion noise, compute
    /// the weighted denoising loss and its gradient, apply Adam at the
    /// scheduled rate, and snap state to the `f32` grid. A non-finite loss
    /// aborts before touching the parameters.
    pub fn step_once(&mut self, dataset: &Dataset) -> Result<StepReport> {
        if dataset.input_dim() != self.net.config.input_dim
            || dataset.cond_dim() != self.net.config.cond_dim
        {
            return Err(Error::contract(format!(
                "dataset widths ({}, {}) do not match network ({}, {})",
                dataset.input_dim(),
                dataset.cond_dim(),
                self.net.config.input_dim,
                self.net.config.cond_dim
            )));
        }
        let step = self.step + 1;
        let batch = self.assemble_batch(dataset, step)?;
        let b = batch.len() as f64;

        let mut grad = vec![0.0; self.params.len()];
        let mut total_loss = 0.0;
        for (i, (x0, cond)) in batch.iter().enumerate() {
            let mut item_rng = rng::item_stream(self.cfg.seed, step, i as u64);
            let draw = draw_loss_noise(&mut item_rng, x0.nrows(), x0.ncols(), self.sched.n_steps);
            let x_n = forward_sample(x0, draw.n, &draw.eps, &self.sched)?;
            let (eps_hat, cache) =
                self.net
                    .forward_cached(&self.params, &x_n, &cond.frames, draw.n)?;
            let kappa = self.weighting.at(draw.n)?;
            let diff = &eps_hat - &draw.eps;
            let item_loss = kappa * diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
            if !item_loss.is_finite() {
                return Err(Error::Training {
                    step,
                    detail: format!("non-finite loss on batch item {i}"),
                });
            }
            total_loss += item_loss;
            let scale = 2.0 * kappa / (diff.len() as f64 * b);
            let d_eps = diff.mapv(|d| d * scale);
            let item_grad = self.net.backward(&self.params, &cache, &d_eps)?;
            for (g, ig) in grad.iter_mut().zip(&item_grad) {
                *g += ig;
            }
        }
        let loss = total_loss / b;
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Training {
                step,
                detail: "non-finite gradient".into(),
            });
        }

        let lr = lr_at(step, &self.cfg);
        let t = step.min(i32::MAX as u64) as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, g), (m, v)) in self
            .params
            .iter_mut()
            .zip(&grad)
            .zip(self.moments.m.iter_mut().zip(self.moments.v.iter_mut()))
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        round_vec_to_f32(&mut self.params);
        round_vec_to_f32(&mut self.moments.m);
        round_vec_to_f32(&mut self.moments.v);
        self.step = step;
        Ok(StepReport { step, loss, lr })
    }
}

/// Drives a complete run: emits the initial checkpoint, then one update per
/// step with a checkpoint every `checkpoint_interval` steps and at the end.
/// Returns the per-step telemetry. A failed step propagates immediately, so
/// the last emitted checkpoint remains the newest good state.
pub fn train<F>(
    net: Denoiser,
    schedule_cfg: ScheduleConfig,
    cfg: TrainConfig,
    dataset: &Dataset,
    mut emit: F,
) -> Result<Vec<StepReport>>
where
    F: FnMut(&Checkpoint) -> Result<()>,
{
    let mut trainer = Trainer::new(net, schedule_cfg, cfg)?;
    train_with(&mut trainer, dataset, &mut emit)
}

/// [`train`] continuing from an existing trainer (fresh or resumed).
pub fn train_with<F>(
    trainer: &mut Trainer,
    dataset: &Dataset,
    emit: &mut F,
) -> Result<Vec<StepReport>>
where
    F: FnMut(&Checkpoint) -> Result<()>,
{
    emit(&trainer.checkpoint())?;
    let target = trainer.cfg.total_steps;
    let interval = trainer.cfg.checkpoint_interval;
    let mut reports = Vec::new();
    let mut last_emitted = trainer.step;
    while trainer.step < target {
        let report = trainer.step_once(dataset)?;
        reports.push(report);
        if trainer.step.is_multiple_of(interval) {
            emit(&trainer.checkpoint())?;
            last_emitted = trainer.step;
        }
    }
    if trainer.step != last_emitted {
        emit(&trainer.checkpoint())?;
    }
    Ok(reports)
}

/// Writes telemetry as `step,loss,lr` CSV.
pub fn write_loss_log(path: &Path, reports: &[StepReport]) -> Result<()> {
    let mut out = String::from("step,loss,lr\n");
    for r in reports {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}
