//! Class-balanced loss weights and the Adam optimiser with exponential
//! learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MIN_WEIGHT: f64 = 0.1;
pub const MAX_WEIGHT: f64 = 20.0;

/// `w_c = -ln(max(n_c, 1) / n)` clamped to `[0.1, 20]`, so rarer classes
/// weigh more. `counts` covers the training classes only; ignored pixels
/// never enter the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

pub fn compute_class_weights(counts: &[u64]) -> Result<ClassWeights> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Label("class histogram is empty".into()));
    }
    let n = total as f64;
    let weights = counts
        .iter()
        .map(|&c| (-((c.max(1) as f64) / n).ln()).clamp(MIN_WEIGHT, MAX_WEIGHT))
        .collect();
    Ok(ClassWeights {
        weights,
        counts: counts.to_vec(),
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr0: f64,
    /// Per-iteration exponent: `lr = lr0 * exp(-decay * it)`.
    pub decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::single_frame()
    }
}

impl OptimizerConfig {
    pub fn single_frame() -> Self {
        Self {
            lr0: 1e-3,
            decay: 5e-5,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn temporal() -> Self {
        Self {
            lr0: 1e-4,
            decay: 2.5e-5,
            ..Self::single_frame()
        }
    }

    pub fn lr(&self, iteration: u64) -> f64 {
        self.lr0 * (-self.decay * iteration as f64).exp()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && self.decay >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config("optimizer settings out of range"))
        }
    }
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    steps: u64,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with the rate for `iteration` and clears gradients.
    pub fn step(&mut self, store: &mut ParamStore, iteration: u64) {
        let lr = self.cfg.lr(iteration);
        self.steps += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = p.grad.take() else { continue };
            let shape = p.value.shape();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(shape));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(shape));
            let wd = self.cfg.weight_decay;
            for (((x, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g + wd * *x;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.cfg.eps);
            }
        }
    }

    /// Moment tensors keyed by parameter index, for checkpoints.
    pub fn state(&self) -> (&[Option<Tensor>], &[Option<Tensor>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: Vec<Option<Tensor>>, v: Vec<Option<Tensor>>, steps: u64) {
        self.m = m;
        self.v = v;
        self.steps = steps;
    }
}
