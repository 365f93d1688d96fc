//! Adam training loop with a two-phase learning-rate schedule.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{detection_loss, detection_loss_with_grad, LossBreakdown, LossWeights, TargetGrids};
use crate::network::Network;
use crate::nn::Tensor;

/// Iterations between validation passes.
pub const VALIDATION_INTERVAL: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_iterations: usize,
    /// Iterations `0..phase_boundary` use `lr_phase1`, the rest `lr_phase2`.
    pub phase_boundary: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub batch_size: usize,
    pub validation_interval: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainSchedule {
    /// 70,000 iterations, 1e-3 for the first 42,000 and 1e-4 afterwards.
    pub fn paper() -> Self {
        Self {
            total_iterations: 70_000,
            phase_boundary: 42_000,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            batch_size: 1,
            validation_interval: VALIDATION_INTERVAL,
        }
    }

    /// Same learning rates with the boundary at 60% of `total`.
    pub fn scaled(total: usize) -> Self {
        Self { total_iterations: total, phase_boundary: total * 3 / 5, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase_boundary > self.total_iterations {
            return Err(Error::Config(format!(
                "phase boundary {} exceeds total iterations {}",
                self.phase_boundary, self.total_iterations
            )));
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.validation_interval == 0 {
            return Err(Error::Config("batch size and validation interval must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for zero-based iteration `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.phase_boundary {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }
}

/// A preprocessed training example: one `[1, 3, S, S]` image and its targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub targets: TargetGrids,
}

fn stack(samples: &[&Sample]) -> (Tensor<f32>, Vec<TargetGrids>) {
    let first = &samples[0].image;
    let mut data = Vec::with_capacity(first.data.len() * samples.len());
    for s in samples {
        data.extend_from_slice(&s.image.data);
    }
    let x = Tensor::from_vec(samples.len(), first.c, first.h, first.w, data);
    (x, samples.iter().map(|s| s.targets.clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for every trainable array.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    steps: i32,
}

impl Adam {
    pub fn new(net: &mut Network<f32>, cfg: AdamConfig) -> Self {
        let sizes: Vec<usize> = net.params_mut().iter().map(|p| p.len()).collect();
        Self { cfg, m: sizes.iter().map(|&n| vec![0.0; n]).collect(), v: sizes.iter().map(|&n| vec![0.0; n]).collect(), steps: 0 }
    }

    pub fn step(&mut self, net: &mut Network<f32>, lr: f64) {
        self.steps += 1;
        let (b1, b2) = (self.cfg.beta1 as f32, self.cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        let step = lr as f32 * c2.sqrt() / c1;
        let eps = self.cfg.eps as f32 * c2.sqrt();
        for ((p, m), v) in net.params_mut().into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p.value[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// One-based count of completed updates.
    pub iteration: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation loss of the untrained network, if a validation set was given.
    pub initial_val_loss: Option<f64>,
    pub records: Vec<IterationRecord>,
}

impl TrainHistory {
    fn mean_train(records: &[IterationRecord]) -> f64 {
        records.iter().map(|r| r.train.total).sum::<f64>() / records.len().max(1) as f64
    }

    /// Mean training loss over the first `window` iterations.
    pub fn initial_train_loss(&self, window: usize) -> f64 {
        Self::mean_train(&self.records[..window.min(self.records.len())])
    }

    /// Mean training loss over the last `window` iterations.
    pub fn final_train_loss(&self, window: usize) -> f64 {
        let n = self.records.len();
        Self::mean_train(&self.records[n - window.min(n)..])
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_loss)
    }

    pub fn lr_history(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lr).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,lr,train_loss,val_loss,coord,obj,class\n");
        if let Some(v) = self.initial_val_loss {
            let _ = writeln!(out, "0,,,{v},,,");
        }
        for r in &self.records {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iteration, r.lr, r.train.total, val, r.train.coord, r.train.objectness, r.train.class
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Mean loss of `samples` with inference-mode normalization.
pub fn validation_loss(net: &Network<f32>, samples: &[Sample], weights: &LossWeights) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    let mut sum = 0.0;
    for s in samples {
        let heads = net.forward(&s.image)?;
        sum += detection_loss(&heads, std::slice::from_ref(&s.targets), net.config(), weights)?.total;
    }
    Ok(sum / samples.len() as f64)
}

/// Checkpoint callback: completed iteration count and the current weights.
pub type CheckpointHook<'a> = &'a mut dyn FnMut(usize, &Network<f32>) -> Result<()>;

/// Options beyond the schedule itself.
pub struct TrainOptions<'a> {
    pub seed: u64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Called with the completed iteration count every `checkpoint_every` updates.
    pub checkpoint_every: Option<usize>,
    pub on_checkpoint: Option<CheckpointHook<'a>>,
}

impl TrainOptions<'_> {
    pub fn seeded(seed: u64) -> Self {
        Self { seed, weights: LossWeights::default(), adam: AdamConfig::default(), checkpoint_every: None, on_checkpoint: None }
    }
}

/// Trains `net` in place. Samples are visited in a seed-determined shuffled
/// order, reshuffled every epoch; validation runs at iteration 0, every
/// `validation_interval` iterations and after the last update.
pub fn train_with(
    net: &mut Network<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    schedule: &TrainSchedule,
    mut opts: TrainOptions<'_>,
) -> Result<TrainHistory> {
    schedule.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut adam = Adam::new(net, opts.adam);
    let mut history = TrainHistory::default();
    if !val_set.is_empty() {
        history.initial_val_loss = Some(validation_loss(net, val_set, &opts.weights)?);
    }

    for it in 0..schedule.total_iterations {
        let mut batch = Vec::with_capacity(schedule.batch_size);
        while batch.len() < schedule.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train_set[order[cursor]]);
            cursor += 1;
        }
        let (x, targets) = stack(&batch);
        let trace = net.forward_train(&x)?;
        let heads = trace.heads();
        if !heads.is_finite() {
            return Err(Error::Divergence { iteration: it + 1 });
        }
        let (loss, grads) = detection_loss_with_grad(&heads, &targets, net.config(), &opts.weights)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence { iteration: it + 1 });
        }
        net.zero_grad();
        net.backward(&trace, &grads)?;
        let lr = schedule.lr_at(it);
        adam.step(net, lr);

        let done = it + 1;
        let val_loss = if !val_set.is_empty() && (done % schedule.validation_interval == 0 || done == schedule.total_iterations) {
            let v = validation_loss(net, val_set, &opts.weights)?;
            info!("iteration {done}: train {:.5} val {v:.5} lr {lr}", loss.total);
            Some(v)
        } else {
            debug!("iteration {done}: train {:.5} lr {lr}", loss.total);
            None
        };
        history.records.push(IterationRecord { iteration: done, lr, train: loss, val_loss });

        if let (Some(every), Some(cb)) = (opts.checkpoint_every, opts.on_checkpoint.as_mut()) {
            if every > 0 && done % every == 0 {
                cb(done, net)?;
            }
        }
    }
    Ok(history)
}

/// [`train_with`] using default loss weights and optimizer settings.
pub fn train(
    net: &mut Network<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainHistory> {
    train_with(net, train_set, val_set, schedule, TrainOptions::seeded(seed))
}
