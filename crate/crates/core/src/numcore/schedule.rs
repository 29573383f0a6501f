use serde::{Deserialize, Serialize};

use super::NumError;

/// One-cycle learning-rate policy: cosine warm-up to the peak, then cosine
/// anneal to `peak / final_div`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycleConfig {
    /// Peak rate at `reference_batch`; scaled linearly with the actual batch size.
    pub peak_lr: f64,
    pub reference_batch: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub div_factor: f64,
    pub final_div: f64,
}

impl Default for OneCycleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-5,
            reference_batch: 128,
            batch_size: 128,
            total_steps: 1000,
            warmup_fraction: 0.3,
            div_factor: 25.0,
            final_div: 1e4,
        }
    }
}

impl OneCycleConfig {
    pub fn validate(&self) -> Result<(), NumError> {
        let bad = |m: &str| Err(NumError::InvalidConfig(m.to_string()));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if !(self.peak_lr > 0.0 && self.div_factor > 0.0 && self.final_div > 0.0) {
            return bad("learning-rate factors must be positive");
        }
        if self.reference_batch == 0 || self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch sizes and total_steps must be positive");
        }
        Ok(())
    }

    /// Peak rate after linear batch-size scaling.
    pub fn scaled_peak(&self) -> f64 {
        self.peak_lr * self.batch_size as f64 / self.reference_batch as f64
    }

    fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }
}

fn cosine(from: f64, to: f64, frac: f64) -> f64 {
    to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

pub fn onecycle_lr(step: usize, cfg: &OneCycleConfig) -> Result<f64, NumError> {
    if step > cfg.total_steps {
        return Err(NumError::StepOutOfRange { step, total: cfg.total_steps });
    }
    let peak = cfg.scaled_peak();
    let start = peak / cfg.div_factor;
    let end = peak / cfg.final_div;
    let warm = cfg.warmup_steps();
    let s = step as f64;
    Ok(if s <= warm {
        cosine(start, peak, s / warm)
    } else {
        cosine(peak, end, (s - warm) / (cfg.total_steps as f64 - warm))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OneCycleConfig {
        OneCycleConfig { total_steps: 1000, ..Default::default() }
    }

    #[test]
    fn endpoints_follow_config_arithmetic() {
        let c = cfg();
        assert!((onecycle_lr(0, &c).unwrap() - 1.2e-6).abs() < 1e-18);
        assert!((onecycle_lr(300, &c).unwrap() - 3e-5).abs() < 1e-18);
        assert!((onecycle_lr(1000, &c).unwrap() - 3e-9).abs() < 1e-20);
    }

    #[test]
    fn out_of_range_step_is_an_error() {
        assert!(matches!(onecycle_lr(1001, &cfg()), Err(NumError::StepOutOfRange { .. })));
    }

    #[test]
    fn adjacent_steps_never_jump() {
        let c = cfg();
        let peak = c.scaled_peak();
        let lrs: Vec<f64> = (0..=c.total_steps).map(|s| onecycle_lr(s, &c).unwrap()).collect();
        // Steepest cosine slope is (range)·π/2 per ramp length; warm-up is the shorter ramp.
        let bound = peak * std::f64::consts::FRAC_PI_2 / 300.0;
        for w in lrs.windows(2) {
            assert!((w[1] - w[0]).abs() <= bound);
        }
    }

    #[test]
    fn peak_scales_with_batch_size() {
        let c = OneCycleConfig { batch_size: 32, ..cfg() };
        assert!((c.scaled_peak() - 7.5e-6).abs() < 1e-18);
    }

    #[test]
    fn invalid_warmup_is_rejected() {
        assert!(OneCycleConfig { warmup_fraction: 1.0, ..cfg() }.validate().is_err());
    }
}
