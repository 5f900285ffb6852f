//! Step-indexed learning-rate and target-sparsity schedules.

/// Warmup length, rounded to a whole step so the peak is hit exactly.
fn warmup_steps(total: usize, warmup_fraction: f64) -> f64 {
    (warmup_fraction * total as f64).round().max(1.0)
}

/// Linear ramp from 0 to `peak` over the warmup, then linear decay to 0 at
/// `total`.
pub fn lr_schedule(step: usize, total: usize, warmup_fraction: f64, peak: f64) -> f64 {
    let w = warmup_steps(total, warmup_fraction);
    let s = step as f64;
    if s < w {
        peak * s / w
    } else if step >= total {
        0.0
    } else {
        peak * (total as f64 - s) / (total as f64 - w).max(1.0)
    }
}

/// Gate step size: the same linear warmup as the weights, then constant.
pub fn gate_lr_schedule(step: usize, total: usize, warmup_fraction: f64, gate_lr: f64) -> f64 {
    gate_lr * (step as f64 / warmup_steps(total, warmup_fraction)).min(1.0)
}

/// Linear ramp from 0 to `target` over the warmup, then constant.
pub fn sparsity_schedule(step: usize, total: usize, warmup_fraction: f64, target: f64) -> f64 {
    let w = warmup_steps(total, warmup_fraction);
    target * (step as f64 / w).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_shape() {
        let (t, p) = (1000, 2e-4);
        assert_eq!(lr_schedule(0, t, 0.07, p), 0.0);
        assert!((lr_schedule(35, t, 0.07, p) - p / 2.0).abs() < 1e-18);
        assert!((lr_schedule(70, t, 0.07, p) - p).abs() < 1e-18);
        assert!((lr_schedule(535, t, 0.07, p) - p / 2.0).abs() < 1e-18);
        assert_eq!(lr_schedule(1000, t, 0.07, p), 0.0);
        let v: Vec<f64> = (0..t).map(|s| lr_schedule(s, t, 0.07, p)).collect();
        assert!(v[..70].windows(2).all(|w| w[1] > w[0]));
        assert!(v[70..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn sparsity_shape() {
        assert_eq!(sparsity_schedule(0, 5000, 0.07, 0.8), 0.0);
        assert!((sparsity_schedule(175, 5000, 0.07, 0.8) - 0.4).abs() < 1e-15);
        assert_eq!(sparsity_schedule(350, 5000, 0.07, 0.8), 0.8);
        assert_eq!(sparsity_schedule(4999, 5000, 0.07, 0.8), 0.8);
    }

    proptest::proptest! {
        // Piecewise-linear with no jumps: no consecutive step moves further
        // than the steeper of the two slopes allows.
        #[test]
        fn schedules_are_continuous(total in 10usize..5000, wf in 0.01f64..0.5) {
            let (peak, target) = (2e-4, 0.8);
            let w = warmup_steps(total, wf);
            let lr_slope = peak / w.min(total as f64 - w).max(1.0);
            for s in 0..total {
                let dl = (lr_schedule(s + 1, total, wf, peak) - lr_schedule(s, total, wf, peak)).abs();
                let dp = (sparsity_schedule(s + 1, total, wf, target) - sparsity_schedule(s, total, wf, target)).abs();
                proptest::prop_assert!(dl <= lr_slope * (1.0 + 1e-9));
                proptest::prop_assert!(dp <= target / w * (1.0 + 1e-9));
            }
        }
    }
}
