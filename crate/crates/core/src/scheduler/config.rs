use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every threshold the scheduler consults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    /// Divergence below which a cache entry gets `tau_max`.
    pub delta1: f64,
    /// Divergence at or above which a cache entry gets `tau_min`.
    pub delta2: f64,
    pub tau_max: usize,
    pub tau_mid: usize,
    pub tau_min: usize,
    pub theta1: f64,
    pub theta2: f64,
    pub bit_max: u8,
    pub bit_mid: u8,
    pub bit_min: u8,
    pub tau_high: f64,
    pub tau_low: f64,
    pub p_base: f64,
    pub delta_low: f64,
    pub delta_high: f64,
    /// Steps of final-block history summed into the cumulative variation.
    pub history_k: usize,
    pub prune_adjust: f64,
    /// Divergence unit used when turning per-layer scores into a redundancy
    /// value; divergences are divided by it first.
    pub divergence_scale: f64,
}

impl Default for ThresholdConfig {
    /// Fixed defaults; the data-dependent ones (`delta*`, `divergence_scale`)
    /// are normally replaced by calibration percentiles.
    fn default() -> Self {
        Self {
            delta1: 1.0,
            delta2: 2.0,
            tau_max: 6,
            tau_mid: 3,
            tau_min: 1,
            theta1: 0.4,
            theta2: 0.8,
            bit_max: 8,
            bit_mid: 6,
            bit_min: 4,
            tau_high: 0.98,
            tau_low: 0.5,
            p_base: 0.3,
            delta_low: 1.0,
            delta_high: 2.0,
            history_k: 3,
            prune_adjust: 2.0,
            divergence_scale: 1.0,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("thresholds.delta1", self.delta1),
            ("thresholds.delta2", self.delta2),
            ("thresholds.theta1", self.theta1),
            ("thresholds.theta2", self.theta2),
            ("thresholds.tau_high", self.tau_high),
            ("thresholds.tau_low", self.tau_low),
            ("thresholds.p_base", self.p_base),
            ("thresholds.delta_low", self.delta_low),
            ("thresholds.delta_high", self.delta_high),
            ("thresholds.prune_adjust", self.prune_adjust),
            ("thresholds.divergence_scale", self.divergence_scale),
        ];
        for (field, v) in finite {
            if v.is_nan() {
                return Err(Error::config(field, "is NaN"));
            }
        }
        let ordered = |lo_name: &str, lo: f64, hi_name: &str, hi: f64| -> Result<()> {
            if lo > hi {
                Err(Error::config(
                    format!("thresholds.{lo_name}/{hi_name}"),
                    format!("{lo_name} = {lo} exceeds {hi_name} = {hi}"),
                ))
            } else {
                Ok(())
            }
        };
        ordered("delta1", self.delta1, "delta2", self.delta2)?;
        ordered("theta1", self.theta1, "theta2", self.theta2)?;
        ordered("tau_low", self.tau_low, "tau_high", self.tau_high)?;
        ordered("delta_low", self.delta_low, "delta_high", self.delta_high)?;
        ordered(
            "tau_min",
            self.tau_min as f64,
            "tau_mid",
            self.tau_mid as f64,
        )?;
        ordered(
            "tau_mid",
            self.tau_mid as f64,
            "tau_max",
            self.tau_max as f64,
        )?;
        ordered(
            "bit_min",
            self.bit_min as f64,
            "bit_mid",
            self.bit_mid as f64,
        )?;
        ordered(
            "bit_mid",
            self.bit_mid as f64,
            "bit_max",
            self.bit_max as f64,
        )?;
        if self.tau_min == 0 {
            return Err(Error::config(
                "thresholds.tau_min",
                "refresh intervals must be positive",
            ));
        }
        for (field, b) in [
            ("thresholds.bit_max", self.bit_max),
            ("thresholds.bit_mid", self.bit_mid),
            ("thresholds.bit_min", self.bit_min),
        ] {
            if ![4, 6, 8].contains(&b) {
                return Err(Error::config(field, format!("{b} is not one of 4, 6, 8")));
            }
        }
        if !(-1.0..=1.0).contains(&self.tau_low) {
            return Err(Error::config("thresholds.tau_low", "must lie in [-1, 1]"));
        }
        // tau_high may sit above 1 to switch forced pruning off
        if self.tau_high < -1.0 {
            return Err(Error::config("thresholds.tau_high", "must be at least -1"));
        }
        if !(0.0..=1.0).contains(&self.p_base) {
            return Err(Error::config("thresholds.p_base", "must lie in [0, 1]"));
        }
        if self.prune_adjust < 1.0 {
            return Err(Error::config(
                "thresholds.prune_adjust",
                "must be at least 1",
            ));
        }
        if self.delta_low < 0.0 || self.delta1 < 0.0 {
            return Err(Error::config(
                "thresholds.delta1",
                "divergence thresholds must be non-negative",
            ));
        }
        if !(self.divergence_scale > 0.0 && self.divergence_scale.is_finite()) {
            return Err(Error::config(
                "thresholds.divergence_scale",
                "must be positive and finite",
            ));
        }
        Ok(())
    }
}
