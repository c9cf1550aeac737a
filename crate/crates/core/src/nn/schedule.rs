use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Cosine annealing with warm restarts. Cycle `c` lasts `t0 * t_mult^c` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdrSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub t0: usize,
    pub t_mult: usize,
}

impl Default for SgdrSchedule {
    fn default() -> Self {
        SgdrSchedule {
            eta_max: 1e-4,
            eta_min: 1e-6,
            t0: 50,
            t_mult: 2,
        }
    }
}

impl SgdrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !self.eta_min.is_finite() || !self.eta_max.is_finite() || self.eta_min >= self.eta_max {
            return Err(Error::Config(format!(
                "need eta_min < eta_max, got {} and {}",
                self.eta_min, self.eta_max
            )));
        }
        if self.t0 < 1 || self.t_mult < 1 {
            return Err(Error::Config(format!(
                "need t0 >= 1 and t_mult >= 1, got {} and {}",
                self.t0, self.t_mult
            )));
        }
        Ok(())
    }

    /// `(offset into the current cycle, current cycle length)` for `epoch`.
    pub fn position(&self, epoch: usize) -> (usize, usize) {
        let mut t_cur = epoch;
        let mut t_i = self.t0;
        while t_cur >= t_i {
            t_cur -= t_i;
            t_i *= self.t_mult;
        }
        (t_cur, t_i)
    }
}

/// Learning rate for `epoch`:
/// `eta_min + (eta_max - eta_min) * (1 + cos(pi * T_cur / T_i)) / 2`.
pub fn sgdr_lr(epoch: usize, s: &SgdrSchedule) -> f64 {
    let (t_cur, t_i) = s.position(epoch);
    s.eta_min + (s.eta_max - s.eta_min) * (1.0 + (PI * t_cur as f64 / t_i as f64).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_points() {
        let s = SgdrSchedule::default();
        assert_eq!(sgdr_lr(0, &s), 1e-4);
        assert!((sgdr_lr(25, &s) - 5.05e-5).abs() < 1e-18);
        assert_eq!(sgdr_lr(50, &s), 1e-4);
        assert_eq!(sgdr_lr(150, &s), 1e-4);
        assert_eq!(s.position(149), (99, 100));
        assert_eq!(s.position(150), (0, 200));
    }

    #[test]
    fn approaches_eta_min_at_cycle_end() {
        let s = SgdrSchedule::default();
        let end = sgdr_lr(49, &s);
        assert!(end > s.eta_min && end - s.eta_min < 1e-7);
        assert!(sgdr_lr(149, &s) - s.eta_min < 3e-8);
    }

    #[test]
    fn monotone_within_cycle() {
        let s = SgdrSchedule::default();
        for e in 0..349 {
            if s.position(e + 1).0 != 0 {
                assert!(sgdr_lr(e + 1, &s) < sgdr_lr(e, &s));
            }
        }
    }

    #[test]
    fn t_mult_one_is_periodic() {
        let s = SgdrSchedule {
            t_mult: 1,
            t0: 10,
            ..Default::default()
        };
        for e in 0..10 {
            assert_eq!(sgdr_lr(e, &s), sgdr_lr(e + 30, &s));
        }
    }

    #[test]
    fn validation() {
        assert!(SgdrSchedule::default().validate().is_ok());
        let bad = SgdrSchedule {
            eta_min: 1e-3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SgdrSchedule {
            t0: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
