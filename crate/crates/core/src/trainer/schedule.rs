use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Teacher momentum: cosine from `start` at step 0 to `end` at `total`.
pub fn momentum_at(step: u64, total: u64, start: f64, end: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::invalid(format!("step {step} outside [0, {total}]")));
    }
    let c = ((PI * step as f64 / total as f64).cos() + 1.0) / 2.0;
    Ok(end - (end - start) * c)
}

/// Linear warmup over the first `warmup_fraction` of steps to `base_lr`, then
/// cosine decay to `min_fraction · base_lr` at `total`.
pub fn lr_schedule(step: u64, total: u64, base_lr: f64, warmup_fraction: f64, min_fraction: f64) -> f64 {
    let total = total.max(1) as f64;
    let s = (step as f64).min(total);
    let warmup = warmup_fraction * total;
    let floor = min_fraction * base_lr;
    if s < warmup {
        return base_lr * s / warmup;
    }
    let span = total - warmup;
    if span <= 0.0 {
        return base_lr;
    }
    let progress = (s - warmup) / span;
    floor + (base_lr - floor) * ((PI * progress).cos() + 1.0) / 2.0
}

/// The default schedule: 10% warmup, decay to 1% of the base rate.
pub fn lr_at(step: u64, total: u64, base_lr: f64) -> f64 {
    lr_schedule(step, total, base_lr, 0.1, 0.01)
}

/// Step at which the Gram teacher snapshot is taken.
pub fn gram_activation_step(total: u64, fraction: f64) -> u64 {
    (fraction * total as f64).ceil() as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_endpoints_and_midpoint() {
        assert_eq!(momentum_at(0, 2000, 0.996, 1.0).unwrap(), 0.996);
        assert_eq!(momentum_at(2000, 2000, 0.996, 1.0).unwrap(), 1.0);
        assert!((momentum_at(1000, 2000, 0.996, 1.0).unwrap() - 0.998).abs() < 1e-15);
        assert!(momentum_at(2001, 2000, 0.996, 1.0).is_err());
    }

    #[test]
    fn lr_endpoints() {
        assert_eq!(lr_at(0, 2000, 1e-3), 0.0);
        assert!((lr_at(200, 2000, 1e-3) - 1e-3).abs() < 1e-18);
        assert!((lr_at(2000, 2000, 1e-3) - 1e-5).abs() < 1e-18);
        assert!(lr_at(100, 2000, 1e-3) < lr_at(150, 2000, 1e-3));
        assert!(lr_at(1500, 2000, 1e-3) > lr_at(1600, 2000, 1e-3));
    }

    #[test]
    fn gram_step_rounds_up() {
        assert_eq!(gram_activation_step(2000, 0.8), 1600);
        assert_eq!(gram_activation_step(11, 0.8), 9);
    }
}
