use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DiTConfig;
use crate::quant::{QuantOptions, WeightBitPlan};
use crate::sampler::NoiseSchedule;
use crate::scheduler::{ThresholdConfig, Toggles};

/// Environment variable that replaces `output.dir`.
pub const OUT_DIR_ENV: &str = "DIT_ACCEL_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_blocks: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub tokens_per_frame: usize,
    pub frames: usize,
    pub cond_dim: usize,
    pub cond_tokens: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DiTConfig::default();
        Self {
            num_blocks: d.num_blocks,
            model_dim: d.model_dim,
            num_heads: d.num_heads,
            tokens_per_frame: d.tokens_per_frame,
            frames: d.frames,
            cond_dim: d.cond_dim,
            cond_tokens: d.cond_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Threshold overrides. Anything left out takes its fixed default or, for
/// the data-dependent thresholds, the calibration percentile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSection {
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    pub tau_max: Option<usize>,
    pub tau_mid: Option<usize>,
    pub tau_min: Option<usize>,
    pub theta1: Option<f64>,
    pub theta2: Option<f64>,
    pub bit_max: Option<u8>,
    pub bit_mid: Option<u8>,
    pub bit_min: Option<u8>,
    pub tau_high: Option<f64>,
    pub tau_low: Option<f64>,
    pub p_base: Option<f64>,
    pub delta_low: Option<f64>,
    pub delta_high: Option<f64>,
    pub history_k: Option<usize>,
    pub prune_adjust: Option<f64>,
    pub divergence_scale: Option<f64>,
}

/// Calibration-derived values for the data-dependent thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedThresholds {
    pub delta1: f64,
    pub delta2: f64,
    pub delta_low: f64,
    pub delta_high: f64,
    pub divergence_scale: f64,
}

impl ThresholdSection {
    /// True when every data-dependent threshold is given explicitly.
    pub fn is_complete(&self) -> bool {
        self.delta1.is_some()
            && self.delta2.is_some()
            && self.delta_low.is_some()
            && self.delta_high.is_some()
            && self.divergence_scale.is_some()
    }

    /// Fills fixed defaults; data-dependent thresholds come from `calibrated`.
    pub fn resolve(&self, calibrated: Option<&CalibratedThresholds>) -> Result<ThresholdConfig> {
        let d = ThresholdConfig::default();
        let need = |v: Option<f64>, field: &str, pick: fn(&CalibratedThresholds) -> f64| {
            v.or_else(|| calibrated.map(pick)).ok_or_else(|| {
                Error::config(
                    format!("thresholds.{field}"),
                    "not set and no calibration available",
                )
            })
        };
        let cfg = ThresholdConfig {
            delta1: need(self.delta1, "delta1", |c| c.delta1)?,
            delta2: need(self.delta2, "delta2", |c| c.delta2)?,
            tau_max: self.tau_max.unwrap_or(d.tau_max),
            tau_mid: self.tau_mid.unwrap_or(d.tau_mid),
            tau_min: self.tau_min.unwrap_or(d.tau_min),
            theta1: self.theta1.unwrap_or(d.theta1),
            theta2: self.theta2.unwrap_or(d.theta2),
            bit_max: self.bit_max.unwrap_or(d.bit_max),
            bit_mid: self.bit_mid.unwrap_or(d.bit_mid),
            bit_min: self.bit_min.unwrap_or(d.bit_min),
            tau_high: self.tau_high.unwrap_or(d.tau_high),
            tau_low: self.tau_low.unwrap_or(d.tau_low),
            p_base: self.p_base.unwrap_or(d.p_base),
            delta_low: need(self.delta_low, "delta_low", |c| c.delta_low)?,
            delta_high: need(self.delta_high, "delta_high", |c| c.delta_high)?,
            history_k: self.history_k.unwrap_or(d.history_k),
            prune_adjust: self.prune_adjust.unwrap_or(d.prune_adjust),
            divergence_scale: need(self.divergence_scale, "divergence_scale", |c| {
                c.divergence_scale
            })?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validates the explicitly given pairs without needing calibration.
    fn validate_partial(&self) -> Result<()> {
        let filler = CalibratedThresholds {
            delta1: self.delta1.or(self.delta2).unwrap_or(0.0),
            delta2: self.delta2.or(self.delta1).unwrap_or(0.0),
            delta_low: self.delta_low.or(self.delta_high).unwrap_or(0.0),
            delta_high: self.delta_high.or(self.delta_low).unwrap_or(0.0),
            divergence_scale: 1.0,
        };
        self.resolve(Some(&filler)).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoPlan {
    Auto,
}

/// `"auto"` allocates from calibration sensitivities; otherwise an explicit plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightBitsSpec {
    Auto(AutoPlan),
    Plan(WeightBitPlan),
}

impl Default for WeightBitsSpec {
    fn default() -> Self {
        WeightBitsSpec::Auto(AutoPlan::Auto)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    pub model: Option<u64>,
    pub sampling: Option<u64>,
    pub prune: Option<u64>,
    pub calibration: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub run_id: Option<String>,
    /// Record wall-clock timings. Off by default so output files are
    /// reproducible byte for byte.
    pub wall_clock: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            run_id: None,
            wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    /// Trajectory timesteps fed to the sensitivity measurement.
    pub batch_timesteps: usize,
    pub rotation_block: usize,
    /// Total weight bits for the `"auto"` plan; defaults to 6 per layer.
    pub budget: Option<u32>,
    /// Load calibration from this file instead of recomputing it.
    pub path: Option<PathBuf>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            batch_timesteps: 5,
            rotation_block: 32,
            budget: None,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; per-purpose seeds default to `seed`, `seed+1`, `seed+2`, `seed+3`.
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub thresholds: ThresholdSection,
    #[serde(default)]
    pub weight_bits: WeightBitsSpec,
    #[serde(default = "Toggles::all")]
    pub toggles: Toggles,
    #[serde(default)]
    pub seeds: SeedSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            thresholds: ThresholdSection::default(),
            weight_bits: WeightBitsSpec::default(),
            toggles: Toggles::all(),
            seeds: SeedSection::default(),
            output: OutputSection::default(),
            calibration: CalibrationSection::default(),
        }
    }

    pub fn model_seed(&self) -> u64 {
        self.seeds.model.unwrap_or(self.seed)
    }

    pub fn sampling_seed(&self) -> u64 {
        self.seeds.sampling.unwrap_or(self.seed.wrapping_add(1))
    }

    pub fn prune_seed(&self) -> u64 {
        self.seeds.prune.unwrap_or(self.seed.wrapping_add(2))
    }

    pub fn calibration_seed(&self) -> u64 {
        self.seeds.calibration.unwrap_or(self.seed.wrapping_add(3))
    }

    pub fn dit_config(&self) -> DiTConfig {
        let m = &self.model;
        DiTConfig {
            num_blocks: m.num_blocks,
            model_dim: m.model_dim,
            num_heads: m.num_heads,
            tokens_per_frame: m.tokens_per_frame,
            frames: m.frames,
            cond_dim: m.cond_dim,
            cond_tokens: m.cond_tokens,
            timesteps: self.schedule.steps,
            seed: self.model_seed(),
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )
    }

    /// Engine options for the configured precision, or `None` when both
    /// quantization toggles are off.
    pub fn quant_options(&self) -> Option<QuantOptions> {
        let t = self.toggles;
        (t.aigq_weights || t.aigq_acts).then(|| QuantOptions {
            weights: t.aigq_weights,
            activations: t.aigq_acts,
            rotation_block: self.calibration.rotation_block,
            sign_seed: self.calibration_seed(),
        })
    }

    pub fn weight_budget(&self) -> u32 {
        self.calibration
            .budget
            .unwrap_or(6 * self.model.num_blocks as u32)
    }

    /// Run identifier: explicit, or derived from the toggles and seed.
    pub fn run_id(&self) -> String {
        self.output
            .run_id
            .clone()
            .unwrap_or_else(|| format!("{}-s{}", self.toggles.label(), self.seed))
    }

    /// Output directory after the environment override.
    pub fn output_dir(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output.dir.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.dit_config().validate()?;
        self.noise_schedule()?;
        self.thresholds.validate_partial()?;
        if let WeightBitsSpec::Plan(p) = &self.weight_bits {
            p.validate(self.model.num_blocks)?;
        }
        let floor = 4 * self.model.num_blocks as u32;
        if self.weight_budget() < floor {
            return Err(Error::config(
                "calibration.budget",
                format!("{} is below the {floor}-bit floor", self.weight_budget()),
            ));
        }
        if self.calibration.batch_timesteps == 0 {
            return Err(Error::config(
                "calibration.batch_timesteps",
                "must be positive",
            ));
        }
        if !self.calibration.rotation_block.is_power_of_two() {
            return Err(Error::config(
                "calibration.rotation_block",
                "must be a power of two",
            ));
        }
        if let Some(id) = &self.output.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return Err(Error::config(
                    "output.run_id",
                    format!("{id:?} is not a plain file name"),
                ));
            }
        }
        Ok(())
    }

    /// Same configuration with every seed spelled out.
    pub fn normalized(&self) -> RunConfig {
        let mut c = self.clone();
        c.seeds = SeedSection {
            model: Some(self.model_seed()),
            sampling: Some(self.sampling_seed()),
            prune: Some(self.prune_seed()),
            calibration: Some(self.calibration_seed()),
        };
        c.calibration.budget = Some(self.weight_budget());
        c
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            match msg.strip_prefix("unknown field ") {
                Some(rest) => Error::config(
                    rest.split('`').nth(1).unwrap_or("?").to_string(),
                    "unknown key",
                ),
                None => Error::Json(e),
            }
        })?;
        cfg.validate()?;
        Ok(cfg.normalized())
    }
}

/// Reads, validates and normalizes a run config.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text)
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&cfg.normalized())?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
