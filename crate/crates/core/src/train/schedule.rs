use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup followed by cosine annealing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub min_lr_ratio: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("train.lr must be a non-negative number, got {}", self.base_lr)));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config(format!("train.min_lr_ratio must lie in [0, 1], got {}", self.min_lr_ratio)));
        }
        Ok(())
    }

    /// Learning rate at `iter ∈ [0, total_iters]`. Warmup longer than the
    /// run is clamped to the run length.
    pub fn lr(&self, iter: usize) -> Result<f64> {
        if iter > self.total_iters {
            return Err(Error::Contract(format!("iteration {iter} beyond schedule of {}", self.total_iters)));
        }
        let warmup = self.warmup_iters.min(self.total_iters);
        if iter < warmup {
            return Ok(self.base_lr * iter as f64 / warmup as f64);
        }
        let span = self.total_iters - warmup;
        let t = if span == 0 { 1.0 } else { (iter - warmup) as f64 / span as f64 };
        let r = self.min_lr_ratio;
        let lr = self.base_lr * (r + (1.0 - r) * (1.0 + (PI * t).cos()) / 2.0);
        // At the warmup boundary t = 0 exactly unless the cosine phase is empty.
        Ok(if iter == warmup && span > 0 { self.base_lr } else { lr })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched(total: usize, warmup: usize, min: f64) -> Schedule {
        Schedule { base_lr: 1e-4, total_iters: total, warmup_iters: warmup, min_lr_ratio: min }
    }

    #[test]
    fn boundaries() {
        let s = sched(1000, 100, 0.0);
        assert_eq!(s.lr(100).unwrap(), 1e-4);
        assert_eq!(s.lr(1000).unwrap(), 0.0);
        assert_eq!(s.lr(0).unwrap(), 0.0);
        assert!((s.lr(50).unwrap() - 0.5e-4).abs() < 1e-20);
    }

    #[test]
    fn midpoint_is_half() {
        let s = sched(300, 100, 0.0);
        assert!((s.lr(200).unwrap() - 0.5e-4).abs() < 1e-18);
    }

    #[test]
    fn floor_is_min_ratio() {
        let s = sched(50, 0, 0.1);
        assert!((s.lr(50).unwrap() - 1e-5).abs() < 1e-18);
        assert_eq!(s.lr(0).unwrap(), 1e-4);
    }

    #[test]
    fn out_of_range_iteration_is_a_contract_error() {
        assert!(matches!(sched(10, 2, 0.0).lr(11), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn cosine_phase_is_monotone(total in 1usize..400, warmup in 0usize..100, min in 0.0f64..1.0) {
            let s = sched(total, warmup, min);
            let start = warmup.min(total);
            let mut prev = f64::INFINITY;
            for i in start..=total {
                let lr = s.lr(i).unwrap();
                prop_assert!(lr <= prev + 1e-18);
                prop_assert!(lr >= 1e-4 * min - 1e-18);
                prev = lr;
            }
        }
    }
}
