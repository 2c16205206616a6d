//! Palindrome loss on the tape, Adam, and the optimisation loop.

use std::rc::Rc;

use gmrw_tape::{Gradients, Scalar, Tape, Tensor, Var};
use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, Palindrome};
use crate::clip::Frame;
use crate::data::{make_training_batch, ClipSource};
use crate::error::{Error, Result};
use crate::grid::grid_coordinates;
use crate::matcher::transition_probs;
use crate::model::Model;
use crate::objective::{edge_weights, flow_from_probs, image_at_grid, total_loss, LossReport, ObjectiveConfig, LOG_FLOOR};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds weight initialisation and the data stream.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, steps: 1000, batch_size: 2, seed: 0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning_rate and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and epsilon be positive".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment gradient descent.
#[derive(Clone, Debug)]
pub struct Adam {
    config: OptimizerConfig,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(config: &OptimizerConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || (0..params.len()).map(|i| Tensor::zeros(params.get(i).shape())).collect();
        Self { config: config.clone(), m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>) {
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let lr = (c.learning_rate * (1.0 - c.beta2.powi(self.t)).sqrt() / (1.0 - c.beta1.powi(self.t))) as f32;
        let eps = c.epsilon as f32;
        for i in 0..params.len() {
            let Some(g) = grads.param(i) else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = params.get_mut(i).data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Loss terms of one batch on the tape.
pub struct BatchLoss<'t, S: Scalar> {
    pub total: Var<'t, S>,
    pub report: LossReport,
}

/// Cycle loss of a batch of palindromes plus smoothness on both hops.
pub fn palindrome_loss<'t, S: Scalar>(
    model: &Model<S>,
    tape: &'t Tape<S>,
    batch: &[Palindrome],
    stride: usize,
    objective: &ObjectiveConfig,
) -> Result<BatchLoss<'t, S>> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let first = &batch[0].frames[0];
    let grid = grid_coordinates(first.height(), first.width(), stride)?;
    let n = grid.len();
    let shape = (grid.rows(), grid.cols());
    let frames: Vec<&Frame> = (0..3).flat_map(|k| batch.iter().map(move |p| &p.frames[k])).collect();
    let tokens = model.encode(tape, &frames, stride)?;
    let (f1, f2, f3) = (tokens.narrow(0, b), tokens.narrow(b, b), tokens.narrow(2 * b, b));
    let (fa, fb) = model.correlate(tape, &Var::concat(&[f1, f2.clone()]), &Var::concat(&[f2, f3]), shape)?;
    let probs = transition_probs(&fa, &fb);
    let chained = probs.narrow(0, b).matmul(&probs.narrow(b, b));

    let mut label = Vec::with_capacity(b * n * n);
    let mut mask = Vec::with_capacity(b * n);
    for p in batch {
        label.extend(p.label.target.data().iter().map(|&v| S::lit(v as f64)));
        mask.extend_from_slice(&p.label.valid_mask);
    }
    let valid = mask.iter().filter(|v| **v).count();
    if valid == 0 {
        return Err(Error::UndefinedLoss);
    }
    let label = Rc::new(Tensor::new(&[b, n, n], label));
    let crw = chained.soft_cross_entropy(label, Rc::new(mask), S::lit(LOG_FLOOR));

    let weight = objective.effective_smoothness_weight();
    let (total, smooth_value) = if weight > 0.0 && grid.rows() >= 3 && grid.cols() >= 3 {
        let flow = flow_from_probs(&probs, &grid).scale(S::lit(1.0 / stride as f64));
        let flow = flow.reshape(&[2 * b, grid.rows(), grid.cols(), 2]);
        let sources: Vec<Frame> = (0..2)
            .flat_map(|k| batch.iter().map(move |p| &p.frames[k]))
            .map(|f| image_at_grid(f, &grid))
            .collect::<Result<_>>()?;
        let refs: Vec<&Frame> = sources.iter().collect();
        let (wx, wy) = edge_weights::<S>(&refs, objective.edge_sensitivity);
        let smooth = flow.second_order_smoothness(Rc::new(wx), Rc::new(wy)).scale(S::lit(0.5));
        let value = smooth.value().item().as_f64();
        (crw.add(&smooth.scale(S::lit(weight))), value)
    } else {
        (crw.clone(), 0.0)
    };
    let report = total_loss(crw.value().item().as_f64(), smooth_value, valid as f64 / (b * n) as f64, objective)?;
    Ok(BatchLoss { total, report })
}

/// Everything the optimisation loop needs besides the clip source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerConfig,
    /// Side of the square augmented views, in pixels.
    pub crop_size: usize,
    pub train_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveConfig::default(),
            augment: AugmentConfig::default(),
            optimizer: OptimizerConfig::default(),
            crop_size: 64,
            train_stride: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.augment.validate()?;
        self.optimizer.validate()?;
        if self.crop_size == 0 || self.train_stride == 0 || self.crop_size % self.train_stride != 0 {
            return Err(Error::Config(format!(
                "crop_size {} must be a positive multiple of train_stride {}",
                self.crop_size, self.train_stride
            )));
        }
        Ok(())
    }
}

/// Stateful optimisation of a model on palindromes from a clip source.
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&config.optimizer, &model.params);
        let rng = ChaCha8Rng::seed_from_u64(config.optimizer.seed);
        Ok(Self { model, config: config.clone(), adam, rng, step: 0 })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One gradient step; aborts before updating on a non-finite loss.
    pub fn step(&mut self, source: &mut dyn ClipSource) -> Result<LossReport> {
        let c = &self.config;
        let size = (c.crop_size, c.crop_size);
        let batch = make_training_batch(source, c.optimizer.batch_size, &c.augment, size, c.train_stride, &mut self.rng)?;
        let (grads, r) = {
            let tape = Tape::new();
            let loss = palindrome_loss(&self.model, &tape, &batch, c.train_stride, &c.objective).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {}: {m}", self.step)),
                e => e,
            })?;
            (tape.backward(&loss.total), loss.report)
        };
        self.adam.step(&mut self.model.params, &grads);
        if !self.model.params.all_finite() {
            return Err(Error::NonFinite(format!("parameters after step {}", self.step)));
        }
        debug!("step {} crw {:.5} smooth {:.5} total {:.5}", self.step, r.crw, r.smooth, r.total);
        self.step += 1;
        Ok(r)
    }

    /// Runs the configured number of steps, calling `on_step` after each.
    pub fn run(
        &mut self,
        source: &mut dyn ClipSource,
        mut on_step: impl FnMut(usize, &LossReport, &Model<f32>) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.config.optimizer.steps {
            let r = self.step(source)?;
            if self.step % 50 == 0 || self.step == self.config.optimizer.steps {
                info!("step {} crw {:.4} smooth {:.4}", self.step, r.crw, r.smooth);
            }
            on_step(self.step - 1, &r, &self.model)?;
        }
        Ok(())
    }
}

/// Header of the loss log.
pub const LOSS_LOG_HEADER: &str = "step,crw,smooth,total,valid_row_fraction";

pub fn loss_log_row(step: usize, r: &LossReport) -> String {
    format!("{step},{:.6},{:.6},{:.6},{:.6}", r.crw, r.smooth, r.total, r.valid_row_fraction)
}
