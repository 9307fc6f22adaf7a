//! Warmup + cosine learning-rate schedule.
//!
//! Expanded models keep the original peak rate but decay over a shorter
//! horizon `T_total`. Warmup is linear from `eta_max/t_warm` to `eta_max`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub eta_max: f64,
    pub eta_min: f64,
    pub t_warm: u64,
    #[serde(rename = "T_total", alias = "t_total")]
    pub t_total: u64,
}

impl ScheduleSpec {
    pub fn new(eta_max: f64, eta_min: f64, t_warm: u64, t_total: u64) -> Result<Self> {
        let s = Self {
            eta_max,
            eta_min,
            t_warm,
            t_total,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min.is_finite() && self.eta_max.is_finite()) {
            return Err(Error::InvalidSchedule("learning rates must be finite".into()));
        }
        if !(0.0 <= self.eta_min && self.eta_min <= self.eta_max) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 <= eta_min ({}) <= eta_max ({})",
                self.eta_min, self.eta_max
            )));
        }
        if self.t_warm >= self.t_total {
            return Err(Error::InvalidSchedule(format!(
                "warmup {} must be shorter than the horizon {}",
                self.t_warm, self.t_total
            )));
        }
        Ok(())
    }

    /// ViT baseline: 1e-3 → 1e-5 over 300 epochs, 5 warmup.
    pub fn vit() -> Self {
        Self::new(1e-3, 1e-5, 5, 300).expect("valid preset")
    }

    /// ViT after expansion: same peak, 130-epoch horizon.
    pub fn vit_lemon() -> Self {
        Self::new(1e-3, 1e-5, 5, 130).expect("valid preset")
    }

    /// BERT baseline: 2e-4 → 2e-5 over 220k iterations, 5k warmup.
    pub fn bert() -> Self {
        Self::new(2e-4, 2e-5, 5_000, 220_000).expect("valid preset")
    }

    /// BERT after expansion, with a 165k or 132k horizon.
    pub fn bert_lemon(t_total: u64) -> Self {
        Self::new(2e-4, 2e-5, 5_000, t_total).expect("valid preset")
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "vit" => Self::vit(),
            "vit-lemon" => Self::vit_lemon(),
            "bert" => Self::bert(),
            "bert-lemon-165k" => Self::bert_lemon(165_000),
            "bert-lemon-132k" => Self::bert_lemon(132_000),
            _ => return None,
        })
    }
}

/// Learning rate at step `t` (`0 <= t <= T_total`).
///
/// The decay endpoints return `eta_max` and `eta_min` exactly.
pub fn cosine_schedule(spec: &ScheduleSpec, t: u64) -> Result<f64> {
    spec.validate()?;
    if t > spec.t_total {
        return Err(Error::InvalidSchedule(format!("step {t} past the horizon {}", spec.t_total)));
    }
    if t < spec.t_warm {
        return Ok(spec.eta_max * (t + 1) as f64 / spec.t_warm as f64);
    }
    if t == spec.t_warm {
        return Ok(spec.eta_max);
    }
    if t == spec.t_total {
        return Ok(spec.eta_min);
    }
    let frac = (t - spec.t_warm) as f64 / (spec.t_total - spec.t_warm) as f64;
    Ok(spec.eta_min + 0.5 * (spec.eta_max - spec.eta_min) * (1.0 + (PI * frac).cos()))
}

/// `step,lr` CSV with one row per step `0..=T_total`, rates printed with 17
/// significant digits.
pub fn schedule_csv(spec: &ScheduleSpec) -> Result<String> {
    spec.validate()?;
    let mut out = String::from("step,lr\n");
    for t in 0..=spec.t_total {
        writeln!(out, "{t},{:.16e}", cosine_schedule(spec, t)?).expect("writing to a String");
    }
    Ok(out)
}
