use serde::{Deserialize, Serialize};

/// Linear warmup from zero to `peak` over `warmup` steps, then linear decay
/// to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        lr_at(self, step)
    }
}

pub fn lr_at(s: &Schedule, step: u64) -> f64 {
    if step >= s.total {
        return 0.0;
    }
    if step < s.warmup {
        return s.peak * step as f64 / s.warmup as f64;
    }
    let span = (s.total - s.warmup) as f64;
    s.peak * (s.total - step) as f64 / span
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knots() {
        let s = Schedule {
            peak: 3e-4,
            warmup: 100,
            total: 1000,
        };
        assert_eq!(lr_at(&s, 0), 0.0);
        assert_eq!(lr_at(&s, 100), 3e-4);
        assert_eq!(lr_at(&s, 1000), 0.0);
        assert_eq!(lr_at(&s, 5000), 0.0);
        assert!((lr_at(&s, 50) - 1.5e-4).abs() < 1e-18);
        // Halfway through the decay leg, (W+S)/2.
        assert!((lr_at(&s, 550) - 1.5e-4).abs() < 1e-18);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let s = Schedule {
            peak: 1.0,
            warmup: 0,
            total: 4,
        };
        let lrs: Vec<f64> = (0..5).map(|t| lr_at(&s, t)).collect();
        assert_eq!(lrs, [1.0, 0.75, 0.5, 0.25, 0.0]);
    }
}
