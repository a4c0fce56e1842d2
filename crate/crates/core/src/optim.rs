//! AdamW with decoupled weight decay and a warmup-then-cosine schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{visit_params, visit_params_mut, Module};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Moment buffers keyed by parameter path. Frozen parameters never get an
/// entry.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
        }
    }

    /// Number of parameters holding optimizer state.
    pub fn tracked(&self) -> usize {
        self.state.len()
    }

    pub fn is_tracked(&self, path: &str) -> bool {
        self.state.contains_key(path)
    }

    /// One update of every trainable parameter that has a gradient. A
    /// non-finite gradient aborts the step before anything changes.
    pub fn step(&mut self, model: &mut dyn Module, lr: f64) -> Result<()> {
        let mut bad = None;
        visit_params(model, "", &mut |path, p| {
            if bad.is_none() && p.trainable() {
                if let Some(g) = p.value().grad() {
                    if g.iter().any(|x| !x.is_finite()) {
                        bad = Some(path.to_string());
                    }
                }
            }
        });
        if let Some(path) = bad {
            return Err(Error::Numeric(format!("non-finite gradient in `{path}`")));
        }
        let c = self.config.clone();
        let state = &mut self.state;
        visit_params_mut(model, "", &mut |path, p| {
            if !p.trainable() {
                return;
            }
            let t = p.value_mut();
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else { return };
            let n = grad.len();
            let s = state.entry(path.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                steps: 0,
            });
            s.steps += 1;
            let bc1 = 1.0 - c.beta1.powi(s.steps as i32);
            let bc2 = 1.0 - c.beta2.powi(s.steps as i32);
            let decay = 1.0 - lr * c.weight_decay;
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * g;
                s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = s.m[i] / bc1;
                let v_hat = s.v[i] / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        });
        Ok(())
    }
}

/// Global L2 norm of trainable gradients.
pub fn grad_norm(model: &dyn Module) -> f64 {
    let mut sq = 0.0;
    visit_params(model, "", &mut |_, p| {
        if let (true, Some(g)) = (p.trainable(), p.value().grad()) {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    });
    sq.sqrt()
}

/// Multiplies every trainable gradient by `factor`.
pub fn scale_grads(model: &mut dyn Module, factor: f64) {
    visit_params_mut(model, "", &mut |_, p| {
        if p.trainable() {
            if let Some(g) = p.value_mut().grad_mut() {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    });
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(model: &mut dyn Module, max_norm: f64) -> f64 {
    let norm = grad_norm(model);
    if norm > max_norm {
        scale_grads(model, max_norm / norm);
    }
    norm
}

/// Linear warmup from zero, then cosine decay to `min_lr` at the final step.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            min_lr: 1e-6,
            warmup_epochs: 1,
            epochs: 5,
        }
    }
}

impl Schedule {
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let warmup = self.warmup_epochs * steps_per_epoch;
        if step < warmup {
            return self.base_lr * step as f64 / warmup as f64;
        }
        let last = (self.epochs * steps_per_epoch).saturating_sub(1);
        if last <= warmup {
            return self.base_lr;
        }
        let progress = (step - warmup) as f64 / (last - warmup) as f64;
        if progress >= 1.0 {
            return self.min_lr;
        }
        let c = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        // written so that progress 0 yields base_lr exactly
        self.base_lr - (self.base_lr - self.min_lr) * (1.0 - c)
    }
}
