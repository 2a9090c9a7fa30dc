use std::f64::consts::PI;

/// Cosine annealing with warm restarts.
///
/// Period `i` lasts `t0 · t_mult^i` steps; within a period the rate decays
/// from `eta_max` to `eta_min` along a half cosine and jumps back to
/// `eta_max` at the next boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineRestartSchedule {
    pub eta_min: f64,
    pub eta_max: f64,
    pub t0: u64,
    pub t_mult: u64,
}

impl CosineRestartSchedule {
    pub fn new(eta_min: f64, eta_max: f64, t0: u64, t_mult: u64) -> Self {
        assert!(t0 >= 1, "initial period must be at least one step");
        assert!(t_mult >= 1, "period multiplier must be at least 1");
        assert!(eta_min <= eta_max, "eta_min must not exceed eta_max");
        Self {
            eta_min,
            eta_max,
            t0,
            t_mult,
        }
    }

    /// Returns `(T_cur, T_i)` for the period containing `step`.
    pub fn position(&self, step: u64) -> (u64, u64) {
        let mut period = self.t0;
        let mut start = 0u64;
        while step >= start + period {
            start += period;
            if self.t_mult > 1 {
                period = period.saturating_mul(self.t_mult);
            }
        }
        (step - start, period)
    }

    pub fn lr(&self, step: u64) -> f64 {
        let (cur, period) = self.position(step);
        if cur == 0 {
            return self.eta_max;
        }
        let cos = (PI * cur as f64 / period as f64).cos();
        let eta = self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + cos);
        eta.clamp(self.eta_min, self.eta_max)
    }

    /// Learning rate at a fractional position inside a period, `t_cur ∈ [0, t_i]`.
    pub fn lr_at(&self, t_cur: f64, t_i: f64) -> f64 {
        self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + (PI * t_cur / t_i).cos())
    }
}
