//! Mini-batch SGD for the first phase and for later phases trained under
//! suppression masks produced by frozen earlier-phase models.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::network::{FcnConfig, FcnModel};
use crate::ops::multilabel_logistic_loss;
use crate::suppression::{build_cumulative_mask, SuppressionMask};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_drop_every: usize,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub rng_seed: u64,
    /// Iterations between checkpoint callbacks; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 15,
            base_lr: 0.001,
            lr_drop_every: 1500,
            lr_drop_factor: 10.0,
            weight_decay: 0.0005,
            rng_seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// The full-scale schedule: 8000 iterations of batch 15, lr 0.001 dropped
    /// tenfold every 2000 iterations, weight decay 0.0005.
    pub fn full_scale() -> Self {
        TrainConfig {
            iterations: 8000,
            batch_size: 15,
            base_lr: 0.001,
            lr_drop_every: 2000,
            lr_drop_factor: 10.0,
            weight_decay: 0.0005,
            rng_seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_drop_every == 0 {
            return Err(Error::Config("batch_size and lr_drop_every must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !(self.lr_drop_factor > 1.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "need base_lr > 0, lr_drop_factor > 1 and weight_decay >= 0, got {}, {}, {}",
                self.base_lr, self.lr_drop_factor, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Step schedule: `base_lr / lr_drop_factor^floor(iter / lr_drop_every)`.
pub fn lr_at(config: &TrainConfig, iter: usize) -> f64 {
    let drops = (iter / config.lr_drop_every) as i32;
    config.base_lr / config.lr_drop_factor.powi(drops)
}

/// `p ← p − lr·(g + weight_decay·p)`; rank-1 tensors (biases) get no decay.
pub fn sgd_update(params: &mut [Tensor], grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("sgd_update", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_update", p.shape(), g.shape()));
        }
        let decay = if p.rank() > 1 { weight_decay } else { 0.0 };
        for (v, &d) in p.data_mut().iter_mut().zip(g.data()) {
            let old = *v as f64;
            *v = (old - lr * (d as f64 + decay * old)) as f32;
        }
    }
    Ok(())
}

/// Maps a training sample to the suppression mask applied at the feedback layer.
pub trait MaskProvider: Sync {
    fn mask(&self, sample: &Sample) -> Result<SuppressionMask>;
}

/// Frozen earlier phases; the mask is the AND of each phase's mask at its own threshold.
#[derive(Clone, Debug)]
pub struct FrozenPhases {
    pub stages: Vec<(FcnModel, f64)>,
}

impl MaskProvider for FrozenPhases {
    fn mask(&self, sample: &Sample) -> Result<SuppressionMask> {
        let stages: Vec<(&FcnModel, f64)> = self.stages.iter().map(|(m, f)| (m, *f)).collect();
        build_cumulative_mask(&stages, &sample.image, &sample.labels)
    }
}

/// The same mask for every sample.
#[derive(Clone, Debug)]
pub struct ConstantMask(pub SuppressionMask);

impl MaskProvider for ConstantMask {
    fn mask(&self, _: &Sample) -> Result<SuppressionMask> {
        Ok(self.0.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_csv(path: &Path, history: &[IterationLog]) -> Result<()> {
    let mut out = Vec::with_capacity(history.len() * 32);
    writeln!(out, "iteration,lr,loss").unwrap();
    for h in history {
        writeln!(out, "{},{},{}", h.iteration, h.lr, h.loss).unwrap();
    }
    crate::io::write_atomic(path, &out)
}

/// Sample order for one epoch; a pure function of (seed, epoch).
fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

fn check_suppressed_zero(features: &Tensor, mask: &Tensor) -> Result<()> {
    let area = mask.len();
    for plane in features.data().chunks_exact(area) {
        for (&v, &m) in plane.iter().zip(mask.data()) {
            if m == 0.0 && v != 0.0 {
                return Err(Error::invalid("train_phase", "activation survived a suppressed position"));
            }
        }
    }
    Ok(())
}

pub type CheckpointFn<'a> = dyn FnMut(usize, &FcnModel) -> Result<()> + 'a;

/// Trains a copy of `model` with mini-batch SGD.
///
/// With a `mask_provider`, each sample's mask is computed once up front and
/// applied at the feedback layer in both passes. Returns the trained model
/// and the per-iteration mean batch loss.
pub fn train_phase(
    model: &FcnModel,
    data: &[Sample],
    config: &TrainConfig,
    mask_provider: Option<&dyn MaskProvider>,
    mut on_checkpoint: Option<&mut CheckpointFn<'_>>,
) -> Result<(FcnModel, Vec<IterationLog>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train_phase", "training set is empty"));
    }
    let masks: Option<Vec<Tensor>> = match mask_provider {
        Some(p) => Some(
            data.par_iter()
                .map(|s| p.mask(s).map(|m| m.grid))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let mut model = model.clone();
    let mut history = Vec::with_capacity(config.iterations);
    let mut epoch = 0;
    let mut order = epoch_order(config.rng_seed, epoch, data.len());
    let mut cursor = 0;
    let batch_size = config.batch_size;
    for iter in 0..config.iterations {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                epoch += 1;
                order = epoch_order(config.rng_seed, epoch, data.len());
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let scale = 1.0 / batch_size as f32;
        let per_sample = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let sample = &data[i];
                let mask = masks.as_ref().map(|m| &m[i]);
                let trace = model.forward_trace(&sample.batch(), mask)?;
                if let (Some(m), 0) = (mask, slot) {
                    check_suppressed_zero(&trace.output.features_at_feedback, m)?;
                }
                let labels = Tensor::new(&[1, sample.labels.len()], sample.labels.clone())?;
                let (loss, grad) = multilabel_logistic_loss(&trace.output.logits, &labels)?;
                let grad = grad.map(|g| g * scale);
                let grads = model.backward_params(&trace, &grad)?;
                Ok((loss as f64, grads.params))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = model.params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        let mut loss = 0.0;
        for (l, grads) in per_sample {
            loss += l;
            for (t, g) in total.iter_mut().zip(&grads) {
                for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        let lr = lr_at(config, iter);
        sgd_update(&mut model.params, &total, lr, config.weight_decay)?;
        history.push(IterationLog {
            iteration: iter,
            lr,
            loss: loss / batch_size as f64,
        });
        if config.checkpoint_every > 0 && (iter + 1) % config.checkpoint_every == 0 {
            if let Some(cb) = on_checkpoint.as_mut() {
                cb(iter + 1, &model)?;
            }
        }
    }
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phase_count: usize,
    /// `thresholds[j]` binarizes the heat maps of phase `j + 1` for every later phase.
    pub thresholds: Vec<f64>,
    pub train: Vec<TrainConfig>,
    /// Initialize later phases from the previous phase instead of a fresh draw.
    #[serde(default)]
    pub warm_start: bool,
}

impl PhasePlan {
    pub fn two_phase(train: TrainConfig) -> Self {
        PhasePlan::with_thresholds(vec![0.6], train)
    }

    pub fn with_thresholds(thresholds: Vec<f64>, train: TrainConfig) -> Self {
        let phase_count = thresholds.len() + 1;
        let train = (0..phase_count)
            .map(|k| TrainConfig {
                rng_seed: phase_seed(train.rng_seed, k + 1),
                ..train.clone()
            })
            .collect();
        PhasePlan {
            phase_count,
            thresholds,
            train,
            warm_start: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase_count == 0 {
            return Err(Error::Config("phase_count must be at least 1".into()));
        }
        if self.thresholds.len() + 1 != self.phase_count || self.train.len() != self.phase_count {
            return Err(Error::Config(format!(
                "{} phases need {} thresholds and {} train configs, got {} and {}",
                self.phase_count,
                self.phase_count - 1,
                self.phase_count,
                self.thresholds.len(),
                self.train.len()
            )));
        }
        for w in self.thresholds.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Config(format!("thresholds must strictly decrease: {:?}", self.thresholds)));
            }
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("threshold {t} outside (0, 1)")));
        }
        for t in &self.train {
            t.validate()?;
        }
        Ok(())
    }
}

/// Seed for phase `phase` (1-based) derived from a base seed; phase 1 keeps the base.
pub fn phase_seed(base: u64, phase: usize) -> u64 {
    if phase <= 1 {
        return base;
    }
    // splitmix64 finalizer
    let mut z = base.wrapping_add((phase as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct PhaseResult {
    pub model: FcnModel,
    pub history: Vec<IterationLog>,
}

/// Trains phase 1 plainly and every later phase under the cumulative mask of all earlier phases.
///
/// `on_phase` sees each finished phase before the next one starts.
pub fn run_pipeline(
    plan: &PhasePlan,
    network: &FcnConfig,
    data: &[Sample],
    mut on_phase: impl FnMut(usize, &PhaseResult) -> Result<()>,
) -> Result<Vec<PhaseResult>> {
    plan.validate()?;
    let mut results: Vec<PhaseResult> = Vec::with_capacity(plan.phase_count);
    for k in 1..=plan.phase_count {
        let init = match results.last() {
            Some(prev) if plan.warm_start => prev.model.clone(),
            _ => FcnModel::init(&FcnConfig {
                rng_seed: phase_seed(network.rng_seed, k),
                ..network.clone()
            })?,
        };
        let provider = (k > 1).then(|| FrozenPhases {
            stages: results
                .iter()
                .zip(&plan.thresholds)
                .map(|(r, &t)| (r.model.clone(), t))
                .collect(),
        });
        let (model, history) = train_phase(
            &init,
            data,
            &plan.train[k - 1],
            provider.as_ref().map(|p| p as &dyn MaskProvider),
            None,
        )?;
        let result = PhaseResult { model, history };
        on_phase(k, &result)?;
        results.push(result);
    }
    Ok(results)
}
