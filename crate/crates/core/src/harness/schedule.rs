use serde::{Deserialize, Serialize};

/// Linear warmup from zero to `base_lr`, then cosine decay to zero at
/// `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = LrSchedule {
            base_lr: 0.05,
            warmup_steps: 50,
            total_steps: 2000,
        };
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(50), 0.05);
        assert!(s.lr(25) > 0.0 && s.lr(25) < 0.05);
        assert!(s.lr(2000).abs() < 1e-15);
        assert!(s.lr(1999) < 1e-6);
        for w in (50..2000).collect::<Vec<_>>().windows(2) {
            assert!(s.lr(w[1]) <= s.lr(w[0]));
        }
    }
}
