use serde::{Deserialize, Serialize};

use super::MacMode;
use crate::error::{Error, Result};

/// Base temperature, decay rate of the hard temperature, and how the two
/// temperatures are assigned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub lambda: f64,
    pub mode: MacMode,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            tau0: 0.05,
            lambda: 0.2,
            mode: MacMode::Mac,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0) {
            return Err(Error::config(format!("tau0 must be positive, got {}", self.tau0)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// The normal temperature, always `tau0` unrounded.
    pub fn tau_norm(&self) -> f64 {
        self.tau0
    }
}

fn check_progress(progress: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::contract(format!("progress {progress} outside [0, 1]")));
    }
    Ok(())
}

/// `round(tau0 · e^(−λ·progress), 3)`, rounding half away from zero.
pub fn tau_hard_at(schedule: &TemperatureSchedule, progress: f64) -> Result<f64> {
    schedule.validate()?;
    check_progress(progress)?;
    let raw = schedule.tau0 * (-schedule.lambda * progress).exp();
    Ok((raw * 1000.0).round() / 1000.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Fixed,
    Dynamic,
    Reverse,
}

impl std::str::FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(AlphaMode::Fixed),
            "dynamic" => Ok(AlphaMode::Dynamic),
            "reverse" => Ok(AlphaMode::Reverse),
            other => Err(Error::config(format!("unknown alpha mode {other:?}"))),
        }
    }
}

/// Contrastive/distillation weights `(α₁, α₂)` over training progress.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub mode: AlphaMode,
    pub start: (f64, f64),
    pub end: (f64, f64),
}

impl AlphaSchedule {
    /// Constant 0.9/0.1.
    pub fn fixed() -> Self {
        Self::constant((0.9, 0.1))
    }

    pub fn constant(alphas: (f64, f64)) -> Self {
        Self {
            mode: AlphaMode::Fixed,
            start: alphas,
            end: alphas,
        }
    }

    /// 0.5/0.5 rising linearly to 0.9/0.1.
    pub fn dynamic() -> Self {
        Self {
            mode: AlphaMode::Dynamic,
            start: (0.5, 0.5),
            end: (0.9, 0.1),
        }
    }

    /// 0.5/0.5 falling linearly to 0.1/0.9.
    pub fn reverse() -> Self {
        Self {
            mode: AlphaMode::Reverse,
            start: (0.5, 0.5),
            end: (0.1, 0.9),
        }
    }

    pub fn for_mode(mode: AlphaMode) -> Self {
        match mode {
            AlphaMode::Fixed => Self::fixed(),
            AlphaMode::Dynamic => Self::dynamic(),
            AlphaMode::Reverse => Self::reverse(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (a1, a2) in [self.start, self.end] {
            if a1 < 0.0 || a2 < 0.0 || ((a1 + a2) - 1.0).abs() > 1e-12 {
                return Err(Error::config(format!(
                    "alpha pair ({a1}, {a2}) must be non-negative and sum to 1"
                )));
            }
        }
        Ok(())
    }
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        Self::fixed()
    }
}

pub fn alpha_at(schedule: &AlphaSchedule, progress: f64) -> Result<(f64, f64)> {
    schedule.validate()?;
    check_progress(progress)?;
    match schedule.mode {
        AlphaMode::Fixed => Ok(schedule.start),
        AlphaMode::Dynamic | AlphaMode::Reverse => {
            let a1 = schedule.start.0 + (schedule.end.0 - schedule.start.0) * progress;
            Ok((a1, 1.0 - a1))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(tau0: f64, lambda: f64) -> TemperatureSchedule {
        TemperatureSchedule {
            tau0,
            lambda,
            mode: MacMode::Mac,
        }
    }

    #[test]
    fn hard_temperature_endpoints() {
        let s = sched(0.05, 0.2);
        assert_eq!(tau_hard_at(&s, 0.0).unwrap(), 0.05);
        assert_eq!(tau_hard_at(&s, 1.0).unwrap(), 0.041);
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(tau_hard_at(&sched(0.05, 0.0), p).unwrap(), 0.05);
        }
    }

    #[test]
    fn hard_temperature_rejects_bad_progress() {
        let s = sched(0.05, 0.2);
        assert!(tau_hard_at(&s, -0.01).is_err());
        assert!(tau_hard_at(&s, 1.01).is_err());
        assert!(tau_hard_at(&s, f64::NAN).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(tau_hard_at(&sched(0.0005, 0.0), 0.0).unwrap(), 0.001);
    }

    #[test]
    fn alpha_schedules() {
        let (a1, a2) = alpha_at(&AlphaSchedule::dynamic(), 0.5).unwrap();
        assert!((a1 - 0.7).abs() < 1e-15 && (a2 - 0.3).abs() < 1e-15);
        for p in [0.0, 0.4, 1.0] {
            assert_eq!(alpha_at(&AlphaSchedule::fixed(), p).unwrap(), (0.9, 0.1));
        }
        let (a1, a2) = alpha_at(&AlphaSchedule::reverse(), 1.0).unwrap();
        assert!((a1 - 0.1).abs() < 1e-15 && (a2 - 0.9).abs() < 1e-15);
        assert!(alpha_at(&AlphaSchedule::fixed(), 2.0).is_err());
    }

    #[test]
    fn alpha_pairs_must_sum_to_one() {
        assert!(AlphaSchedule::constant((0.6, 0.6)).validate().is_err());
        assert!(AlphaSchedule::constant((1.0, 0.0)).validate().is_ok());
    }
}
