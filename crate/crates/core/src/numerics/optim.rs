//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::param::Module;
use super::tape::Gradients;
use super::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Clip the global gradient norm to this value when set.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    #[serde(default)]
    pub schedule: LrSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays linearly from `lr` at the first step towards zero after the last.
    Linear,
}

impl LrSchedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Linear => 1.0 - step.min(total) as f64 / total.max(1) as f64,
        }
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            max_grad_norm: None,
            schedule: LrSchedule::Constant,
        }
    }
}

/// Optimizer state laid out in module visit order.
pub struct AdamW<T> {
    cfg: AdamWConfig,
    lr_scale: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            lr_scale: 1.0,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Set the schedule position before the update with 0-based index `step`
    /// out of `total`.
    pub fn set_progress(&mut self, step: usize, total: usize) {
        self.lr_scale = self.cfg.schedule.factor(step, total);
    }

    /// Apply one update using gradients summed over `scale_count` examples
    /// (gradients are divided by it). Parameters without a gradient only
    /// receive weight decay.
    pub fn step<M: Module<T>>(&mut self, model: &mut M, grads: &[&Gradients<T>], scale_count: usize) {
        let mut buffer = GradBuffer::new(model);
        for g in grads {
            buffer.add(model, g);
        }
        self.apply(model, buffer, scale_count);
    }

    /// Update from an accumulated buffer holding the sum over `scale_count` examples.
    pub fn apply<M: Module<T>>(&mut self, model: &mut M, buffer: GradBuffer<T>, scale_count: usize) {
        let inv = T::one() / T::lit(scale_count.max(1) as f64);
        let mut flat = buffer.flat;
        for g in &mut flat {
            for a in g.iter_mut() {
                *a *= inv;
            }
        }
        if let Some(max_norm) = self.cfg.max_grad_norm {
            let mut sq = 0.0f64;
            for g in &flat {
                for v in g {
                    sq += v.as_f64() * v.as_f64();
                }
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                let s = T::lit(max_norm / norm);
                for g in &mut flat {
                    for v in g.iter_mut() {
                        *v *= s;
                    }
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = T::lit(1.0 - b1.powi(t));
        let bc2 = T::lit(1.0 - b2.powi(t));
        let (b1, b2) = (T::lit(b1), T::lit(b2));
        let lr = T::lit(self.cfg.lr * self.lr_scale);
        let wd = T::lit(self.cfg.weight_decay);
        let eps = T::lit(self.cfg.eps);
        if self.first.is_empty() {
            self.first = flat.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.second = self.first.clone();
        }
        let (first, second) = (&mut self.first, &mut self.second);
        let mut idx = 0;
        model.visit_mut("", &mut |_, p| {
            let g = &flat[idx];
            let (m, v) = (&mut first[idx], &mut second[idx]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
            idx += 1;
        });
    }
}

/// Per-parameter gradient sums in module visit order.
pub struct GradBuffer<T> {
    flat: Vec<Vec<T>>,
}

impl<T: Real> GradBuffer<T> {
    pub fn new<M: Module<T>>(model: &M) -> Self {
        let mut flat = Vec::new();
        model.visit("", &mut |_, p| flat.push(vec![T::zero(); p.value.len()]));
        Self { flat }
    }

    pub fn add<M: Module<T>>(&mut self, model: &M, grads: &Gradients<T>) {
        let mut idx = 0;
        let flat = &mut self.flat;
        model.visit("", &mut |_, p| {
            if let Some(t) = grads.param(p) {
                for (a, &b) in flat[idx].iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
            idx += 1;
        });
    }
}
