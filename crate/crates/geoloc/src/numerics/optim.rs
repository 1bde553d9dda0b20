//! Momentum SGD with weight decay and a milestone learning-rate schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::numerics::param::Parameter;
use crate::{Error, Result};

fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_milestones() -> Vec<usize> {
    vec![4, 8, 12, 13, 14, 15]
}
fn default_gamma() -> f64 {
    0.5
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `gamma`; an epoch
    /// counts as passed once `set_epoch(e)` with e >= milestone was called.
    #[serde(default = "default_milestones")]
    pub milestones: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            milestones: default_milestones(),
            gamma: default_gamma(),
        }
    }
}

/// Optimizer state: per-parameter momentum buffers keyed by parameter name,
/// plus the current epoch for the schedule.
pub struct Sgd {
    config: SgdConfig,
    buffers: HashMap<String, Vec<f64>>,
    epoch: usize,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Sgd {
        Sgd {
            config,
            buffers: HashMap::new(),
            epoch: 0,
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Current learning rate: initial_lr * gamma^k where k is the number of
    /// passed milestones (milestone <= epoch).
    pub fn learning_rate(&self) -> f64 {
        let passed = self
            .config
            .milestones
            .iter()
            .filter(|&&m| m <= self.epoch)
            .count();
        self.config.lr * self.config.gamma.powi(passed as i32)
    }

    /// One update: buf <- momentum*buf + (grad + weight_decay*value);
    /// value <- value - lr*buf. Buffers start at zero, so the first step
    /// applies the raw (decayed) gradient. No-op on an empty parameter set.
    /// Fails if an update would leave a parameter non-finite (divergence).
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        let lr = self.learning_rate();
        for p in params.iter_mut() {
            let n = p.numel();
            let buf = self
                .buffers
                .entry(p.name().to_string())
                .or_insert_with(|| vec![0.0; n]);
            let mut next = p.value().data().to_vec();
            for i in 0..n {
                let g = p.grad()[i] + self.config.weight_decay * next[i];
                buf[i] = self.config.momentum * buf[i] + g;
                next[i] -= lr * buf[i];
            }
            p.set_data(next).map_err(|_| {
                Error::data(format!(
                    "parameter {} became non-finite during the update; \
                     training diverged (try a lower learning rate)",
                    p.name()
                ))
            })?;
        }
        Ok(())
    }

    /// Momentum buffers in name-sorted order, for checkpointing.
    pub fn buffers_sorted(&self) -> Vec<(String, Vec<f64>)> {
        let mut out: Vec<(String, Vec<f64>)> = self
            .buffers
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Restores momentum buffers saved by `buffers_sorted`.
    pub fn restore_buffers(&mut self, buffers: Vec<(String, Vec<f64>)>) {
        self.buffers = buffers.into_iter().collect();
    }
}
