use std::f64::consts::PI;

use super::TrainConfig;

/// Learning rate at optimizer step `step` (0-based).
///
/// Linear from `lr_start` to `lr_peak` over the warmup steps, then a cosine
/// from `lr_peak` at the first post-warmup step to `lr_final` at the last
/// step of the last epoch. Steps past the end stay at `lr_final`.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.max_epochs * steps_per_epoch;
    if step < warmup {
        let f = step as f64 / warmup as f64;
        return (1.0 - f) * cfg.lr_start + f * cfg.lr_peak;
    }
    let span = total.saturating_sub(1).saturating_sub(warmup);
    let p = if span == 0 {
        1.0
    } else {
        ((step - warmup) as f64 / span as f64).min(1.0)
    };
    cfg.lr_final + 0.5 * (cfg.lr_peak - cfg.lr_final) * (1.0 + (PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_hold_exactly() {
        let cfg = TrainConfig::default();
        let spe = 7;
        assert_eq!(lr_at(0, spe, &cfg), 1e-9);
        assert_eq!(lr_at(5 * spe, spe, &cfg), 1e-4);
        assert_eq!(lr_at(120 * spe - 1, spe, &cfg), 1e-8);
        assert_eq!(lr_at(120 * spe + 40, spe, &cfg), 1e-8);
    }

    #[test]
    fn boundary_is_continuous() {
        let cfg = TrainConfig::default();
        let spe = 1000;
        let left = lr_at(5 * spe - 1, spe, &cfg);
        let right = lr_at(5 * spe, spe, &cfg);
        assert!((right - left).abs() < 1e-4 / spe as f64 * 1.01);
        // the linear ramp, extended to the boundary, lands exactly on the peak
        let f = 1.0;
        assert_eq!((1.0 - f) * cfg.lr_start + f * cfg.lr_peak, right);
    }

    #[test]
    fn warmup_is_increasing_and_cosine_decreasing() {
        let cfg = TrainConfig { max_epochs: 10, warmup_epochs: 2, ..Default::default() };
        let lrs: Vec<f64> = (0..50).map(|s| lr_at(s, 5, &cfg)).collect();
        assert!(lrs[..10].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[10..].windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let cfg = TrainConfig { warmup_epochs: 0, max_epochs: 3, ..Default::default() };
        assert_eq!(lr_at(0, 4, &cfg), cfg.lr_peak);
        assert_eq!(lr_at(11, 4, &cfg), cfg.lr_final);
    }
}
