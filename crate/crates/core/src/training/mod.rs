//! Loss, the Adam optimiser and the training loop.

mod check;
mod checkpoint;

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use check::{grad_check_fixture, model_grad_check};
pub use checkpoint::{config_differences, Checkpoint, ParamArray, MAGIC};

use crate::error::{Error, Result};
use crate::imaging::{augment, PairedImages};
use crate::model::Model;
use crate::tensor::{ops, Graph, ParamStore, Tensor};

/// Mean absolute error.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    ops::l1_loss(pred, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    L2,
}

/// Storage precision of the trained parameters. Arithmetic always runs in
/// f64; with `F32` every parameter is rounded to the nearest f32 after each
/// update, so checkpoints store f32 without loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "32")]
    F32,
    #[serde(rename = "64")]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Steps between learning-rate halvings; `None` means a quarter of
    /// `steps`.
    pub lr_halve_every: Option<usize>,
    pub batch: usize,
    pub lr_patch: usize,
    /// May be 0, in which case the model is left as initialised.
    pub steps: usize,
    pub seed: u64,
    pub precision: Precision,
    pub loss: LossKind,
    /// Random flips and rotations of each patch.
    pub augment: bool,
    /// Steps between checkpoints, 0 for none.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            lr_halve_every: None,
            batch: 16,
            lr_patch: 48,
            steps: 1000,
            seed: 0,
            precision: Precision::F64,
            loss: LossKind::L1,
            augment: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.lr_patch == 0 {
            return Err(Error::Config("batch and lr_patch must be positive".into()));
        }
        if self.lr_halve_every == Some(0) {
            return Err(Error::Config("lr_halve_every must be positive".into()));
        }
        Ok(())
    }

    pub fn halve_every(&self) -> usize {
        self.lr_halve_every.unwrap_or((self.steps / 4).max(1))
    }

    /// Learning rate used for the update at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let halvings = (step / self.halve_every()).min(1000) as i32;
        self.lr * 0.5f64.powi(halvings)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every trainable parameter. Every trainable parameter
    /// must carry a gradient.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimiser built for {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::Usage(format!("missing grads for parameter {}", p.name)));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            for (((w, &g), m), v) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn round_to_precision(params: &mut ParamStore, precision: Precision) {
    if precision == Precision::F32 {
        for p in params.iter_mut() {
            p.tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    /// Number of updates applied after this point (1-based).
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_loss_csv(path: &Path, points: &[LossPoint]) -> Result<()> {
    let mut out = String::from("step,loss,lr\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.step, p.loss, p.lr));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Hooks called by [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _point: &LossPoint) {}

    /// Called every `checkpoint_every` steps and after the last step.
    fn on_checkpoint(&mut self, _step: usize, _model: &Model, _config: &TrainConfig) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Draws seeded, optionally augmented mini-batches. Grayscale patches are
/// replicated to three channels.
pub struct BatchSampler<'a> {
    pairs: Vec<&'a PairedImages>,
    rng: ChaCha8Rng,
    batch: usize,
    lr_patch: usize,
    augment: bool,
}

impl<'a> BatchSampler<'a> {
    /// Images smaller than one patch are skipped with a warning.
    pub fn new(data: &'a [PairedImages], config: &TrainConfig) -> Result<Self> {
        let pairs: Vec<_> = data
            .iter()
            .filter(|p| {
                let fits = p.lr.width() >= config.lr_patch && p.lr.height() >= config.lr_patch;
                if !fits {
                    warn!(
                        "skipping {}: {}x{} LR is smaller than patch {}",
                        p.name,
                        p.lr.width(),
                        p.lr.height(),
                        config.lr_patch
                    );
                }
                fits
            })
            .collect();
        if pairs.is_empty() {
            return Err(Error::Usage("no training image is large enough for one patch".into()));
        }
        Ok(BatchSampler {
            pairs,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            batch: config.batch,
            lr_patch: config.lr_patch,
            augment: config.augment,
        })
    }

    /// `(lr, hr)` tensors of shape (B, C, p, p) and (B, C, p*s, p*s).
    pub fn next_batch(&mut self) -> Result<(Tensor, Tensor)> {
        let mut lr = Vec::with_capacity(self.batch);
        let mut hr = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let idx = self.rng.gen_range(0..self.pairs.len());
            let mut patch = self.pairs[idx].sample_patch(&mut self.rng, self.lr_patch)?;
            if self.augment {
                patch = augment(&patch, self.rng.gen_range(0..8u8))?;
            }
            lr.push(patch.lr.to_rgb().to_tensor());
            hr.push(patch.hr.to_rgb().to_tensor());
        }
        Ok((Tensor::stack(&lr)?, Tensor::stack(&hr)?))
    }
}

/// Loss and gradients of one batch, accumulated into the model parameters.
pub fn loss_and_grads(model: &mut Model, lr: &Tensor, hr: &Tensor, loss: LossKind) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(lr.clone())?;
    let y = model.forward(&mut g, x, None)?;
    let l = match loss {
        LossKind::L1 => g.l1_loss(y, hr)?,
        LossKind::L2 => g.l2_loss(y, hr)?,
    };
    g.backward(l)?;
    model.params_mut().zero_grad();
    g.accumulate_param_grads(model.params_mut())?;
    g.value(l).item()
}

fn max_abs_grad(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .fold(0.0, |m: f64, v| if v.is_nan() { f64::NAN } else { m.max(v.abs()) })
}

/// Trains `model` in place and returns the loss curve.
///
/// The run is a pure function of the initial parameters, the data and
/// `config`: batches come from a ChaCha8 stream seeded with `config.seed`
/// and all kernels reduce in a fixed order. A non-finite loss or gradient
/// aborts with [`Error::Diverged`].
pub fn train(
    model: &mut Model,
    data: &[PairedImages],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<LossPoint>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    round_to_precision(model.params_mut(), config.precision);
    if config.steps == 0 {
        observer.on_checkpoint(0, model, config)?;
        return Ok(Vec::new());
    }
    let mut sampler = BatchSampler::new(data, config)?;
    let mut adam = Adam::new(model.params());
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let lr = config.lr_at(step);
        let (x, y) = sampler.next_batch()?;
        let diverged = |max_grad| Error::Diverged { step, lr, max_grad };
        let loss = match loss_and_grads(model, &x, &y, config.loss) {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        let max_grad = max_abs_grad(model.params());
        if !loss.is_finite() || !max_grad.is_finite() {
            return Err(diverged(max_grad));
        }
        adam.step(model.params_mut(), lr)?;
        round_to_precision(model.params_mut(), config.precision);
        if model.params().iter().any(|p| !p.tensor.is_finite()) {
            return Err(diverged(max_grad));
        }
        let point = LossPoint {
            step: step + 1,
            loss,
            lr,
        };
        observer.on_step(&point);
        curve.push(point);
        let done = step + 1;
        if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) || done == config.steps {
            observer.on_checkpoint(done, model, config)?;
        }
        if done % 50 == 0 {
            info!("step {done}/{}: loss {loss:.6} lr {lr:.3e}", config.steps);
        }
    }
    Ok(curve)
}
