//! Adam with bias correction and per-group learning-rate multipliers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, Moments>,
    /// `(name prefix, multiplier)`; the first matching prefix wins.
    multipliers: Vec<(String, f64)>,
}

/// Effective learning rate per parameter group for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub base_lr: f64,
    /// `(group prefix, effective lr)` for every configured multiplier group.
    pub group_lrs: Vec<(String, f64)>,
    pub updated_params: usize,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
            multipliers: Vec::new(),
        }
    }

    /// Parameters whose name starts with `prefix` step with `lr * multiplier`.
    pub fn with_group(mut self, prefix: impl Into<String>, multiplier: f64) -> Self {
        self.multipliers.push((prefix.into(), multiplier));
        self
    }

    pub fn multiplier_for(&self, name: &str) -> f64 {
        self.multipliers
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(1.0, |(_, m)| *m)
    }

    pub fn groups(&self) -> &[(String, f64)] {
        &self.multipliers
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn insert_moments(&mut self, name: impl Into<String>, moments: Moments) {
        self.moments.insert(name.into(), moments);
    }
}

/// One Adam update of every trainable parameter in `params`.
///
/// Fails without touching anything when a trainable parameter lacks a
/// gradient. Frozen parameters are never written.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<StepReport> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(TensorError::InvalidHyperparameter(format!("learning rate {lr}")));
    }
    for (name, t) in params.iter() {
        if t.requires_grad && t.grad.is_none() {
            return Err(TensorError::MissingGrad(name.to_string()));
        }
    }
    // Accumulators exist exactly for the currently trainable set.
    state
        .moments
        .retain(|name, _| params.is_trainable(name) == Some(true));

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let mut updated = 0;
    let multipliers = state.multipliers.clone();
    for (name, t) in params.iter_mut() {
        if !t.requires_grad {
            continue;
        }
        let mult = multipliers
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(1.0, |(_, m)| *m);
        let step_lr = lr * mult;
        let n = t.numel();
        let mom = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
        let grad = t.grad.take().expect("checked above");
        let data = t.data_mut();
        for i in 0..n {
            let g = grad[i];
            mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
            mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
            let mhat = mom.m[i] / bc1;
            let vhat = mom.v[i] / bc2;
            data[i] -= step_lr * mhat / (vhat.sqrt() + eps);
        }
        t.grad = Some(grad);
        updated += 1;
    }
    Ok(StepReport {
        step: state.step,
        base_lr: lr,
        group_lrs: multipliers
            .iter()
            .map(|(p, m)| (p.clone(), lr * m))
            .collect(),
        updated_params: updated,
    })
}
