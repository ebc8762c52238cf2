use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{Gradients, ParamStore};

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 2e-4, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            bail!(Config, "learning rate must be positive and weight decay non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            bail!(Config, "betas must lie in [0, 1) and eps be positive");
        }
        Ok(())
    }
}

/// Warm-up then cosine decay with hard restarts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub total_steps: u64,
    pub warmup_ratio: f64,
    pub cycles: u32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { total_steps: 1000, warmup_ratio: 0.03, cycles: 1 }
    }
}

impl ScheduleConfig {
    pub fn warmup_steps(&self) -> u64 {
        libm::ceil(self.warmup_ratio * self.total_steps as f64) as u64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            bail!(Config, "warm-up ratio {} outside (0, 1)", self.warmup_ratio);
        }
        if self.total_steps == 0 || self.cycles == 0 {
            bail!(Config, "total steps and cycle count must be positive");
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear warm-up from 0 to `base_lr`, then a
/// cosine decay to 0 within each of the schedule's cycles.
pub fn lr_at(step: u64, schedule: &ScheduleConfig, base_lr: f64) -> f64 {
    let warmup = schedule.warmup_steps();
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = schedule.total_steps.saturating_sub(warmup);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup) as f64 / span as f64;
    if progress >= 1.0 {
        return 0.0;
    }
    let phase = (schedule.cycles as f64 * progress) % 1.0;
    base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * phase))
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// One decoupled-weight-decay Adam update at learning rate `lr`.
    ///
    /// Parameters without a gradient entry keep their moments and skip the
    /// update; frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, cfg: &OptimizerConfig, lr: f64) {
        if self.m.len() != store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(cfg.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, self.t as f64);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let i = id.index();
            if self.m[i].len() != g.len() {
                self.m[i] = vec![0.0; g.len()];
                self.v[i] = vec![0.0; g.len()];
            }
            let decay = if p.decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let update = (m[k] / bc1) / (libm::sqrt(v[k] / bc2) + cfg.eps);
                *w = *w * decay - lr * update;
            }
        }
    }
}
