use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};

/// Linear warmup followed by cosine decay, evaluated at (fractional) epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub total_epochs: usize,
    pub min_lr: f64,
    /// Multiplier applied to the classifier parameter group.
    pub classifier_multiplier: f64,
    /// Interpolate within an epoch instead of holding the epoch-start value.
    pub per_step: bool,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-5,
            warmup_epochs: 5,
            warmup_start_lr: 1e-6,
            total_epochs: 60,
            min_lr: 0.0,
            classifier_multiplier: 5.0,
            per_step: false,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.warmup_start_lr > 0.0
            && self.min_lr >= 0.0
            && self.classifier_multiplier > 0.0
            && self.total_epochs > 0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::InvalidHyperparameter(format!("{self:?}")))
        }
    }

    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        if !(0.0..=self.total_epochs as f64).contains(&epoch) {
            return Err(TensorError::EpochOutOfRange {
                epoch,
                total: self.total_epochs,
            });
        }
        let warm = self.warmup_epochs as f64;
        if epoch < warm {
            return Ok(self.warmup_start_lr + (self.base_lr - self.warmup_start_lr) * epoch / warm);
        }
        let span = self.total_epochs as f64 - warm;
        if span <= 0.0 {
            return Ok(self.base_lr);
        }
        let progress = (epoch - warm) / span;
        Ok(self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos()))
    }

    /// Learning rate used for step `step` of `steps_per_epoch` in `epoch`.
    pub fn lr_for_step(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> Result<f64> {
        let at = if self.per_step && steps_per_epoch > 0 {
            epoch as f64 + step as f64 / steps_per_epoch as f64
        } else {
            epoch as f64
        };
        self.lr_at(at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_hit_warmup_endpoints() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0.0).unwrap(), 1e-6);
        assert_eq!(s.lr_at(5.0).unwrap(), 1e-5);
        assert_eq!(s.lr_at(60.0).unwrap(), 0.0);
        // cosine midpoint
        assert!((s.lr_at(32.5).unwrap() - 5e-6).abs() < 1e-18);
    }

    #[test]
    fn continuous_at_boundary_and_non_increasing_after() {
        let s = LrSchedule::default();
        let left = s.lr_at(5.0 - 1e-9).unwrap();
        assert!((left - s.lr_at(5.0).unwrap()).abs() < 1e-14);
        let mut prev = f64::INFINITY;
        for i in 0..=550 {
            let lr = s.lr_at(5.0 + i as f64 * 0.1).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn out_of_range_rejected() {
        let s = LrSchedule::default();
        assert!(s.lr_at(-0.1).is_err());
        assert!(s.lr_at(60.5).is_err());
    }

    #[test]
    fn per_step_interpolation_is_opt_in() {
        let mut s = LrSchedule::default();
        assert_eq!(s.lr_for_step(1, 3, 4).unwrap(), s.lr_at(1.0).unwrap());
        s.per_step = true;
        assert_eq!(s.lr_for_step(1, 3, 4).unwrap(), s.lr_at(1.75).unwrap());
    }
}
