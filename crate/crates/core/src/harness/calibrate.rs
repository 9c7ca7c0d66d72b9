use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{CalibratedThresholds, RunConfig, WeightBitsSpec};
use crate::error::{Error, Result};
use crate::model::{init_model, DiT, LayerHooks, LinearSite};
use crate::quant::{
    allocate_weight_bits, measure_sensitivities, ActivationStats, CalibrationSample, QuantEngine,
    QuantOptions, WeightBitPlan,
};
use crate::sampler::{generate_with_hooks, NoiseSchedule, NoiseSource};
use crate::scheduler::ThresholdConfig;
use crate::scheduler::{cumulative_variation, divergence_score};
use crate::tensor::{matmul_fp, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p25: f64,
    pub p33: f64,
    pub p50: f64,
    pub p66: f64,
    pub p75: f64,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("percentiles of an empty sample".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        Ok(Self {
            p25: percentile(&v, 25.0),
            p33: percentile(&v, 33.0),
            p50: percentile(&v, 50.0),
            p66: percentile(&v, 66.0),
            p75: percentile(&v, 75.0),
        })
    }
}

/// Linear interpolation between order statistics of a sorted sample.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    /// Range of the block's output over the calibration trajectory.
    pub min: f32,
    pub max: f32,
    pub sensitivity: f64,
}

/// Everything derived offline: activation ranges and sensitivities from a
/// full-precision trajectory, divergence and variation distributions from a
/// trajectory at the precision the run will use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub model_checksum: String,
    pub seed: u64,
    /// Quantization the divergence and variation samples were measured
    /// under; `None` for full precision.
    pub numerics: Option<QuantOptions>,
    pub divergence: Percentiles,
    pub variation: Percentiles,
    pub layers: Vec<LayerCalibration>,
    pub activation_stats: ActivationStats,
    pub weight_plan: WeightBitPlan,
}

impl Calibration {
    /// `delta1/delta2` at the 33rd/66th divergence percentiles, `delta_low/high`
    /// at the 25th/75th variation percentiles, divergence unit at the median.
    pub fn thresholds(&self) -> CalibratedThresholds {
        CalibratedThresholds {
            delta1: self.divergence.p33,
            delta2: self.divergence.p66,
            delta_low: self.variation.p25,
            delta_high: self.variation.p75,
            divergence_scale: if self.divergence.p50 > 0.0 {
                self.divergence.p50
            } else {
                1.0
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Records projection inputs and block outputs during a plain forward pass.
struct Recorder {
    stats: ActivationStats,
    /// Block outputs of the step being run.
    step_outputs: Vec<Tensor>,
    ranges: Vec<(f32, f32)>,
}

impl LayerHooks for Recorder {
    fn linear(&mut self, site: LinearSite, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        self.stats.observe(site, x);
        matmul_fp(x, w)
    }

    fn after_block(&mut self, layer: usize, _input: &Tensor, output: &Tensor) -> Result<()> {
        let (lo, hi) = &mut self.ranges[layer];
        for &v in output.data() {
            *lo = lo.min(v);
            *hi = hi.max(v);
        }
        self.step_outputs.push(output.clone());
        Ok(())
    }
}

/// Collects block outputs while delegating projections to `inner`.
struct OutputCapture<H> {
    inner: H,
    outputs: Vec<Tensor>,
}

impl<H: LayerHooks> LayerHooks for OutputCapture<H> {
    fn linear(&mut self, site: LinearSite, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        self.inner.linear(site, x, w)
    }

    fn after_block(&mut self, _layer: usize, _input: &Tensor, output: &Tensor) -> Result<()> {
        self.outputs.push(output.clone());
        Ok(())
    }
}

/// Per-layer one-step divergences and final-block variations of a
/// trajectory given as T·L block outputs in denoising order.
fn trajectory_scores(
    outputs: &[Tensor],
    layers: usize,
    history_k: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let steps: Vec<&[Tensor]> = outputs.chunks(layers).collect();
    let mut divergences = Vec::new();
    for i in 1..steps.len() {
        for (now, prev) in steps[i].iter().zip(steps[i - 1]) {
            divergences.push(divergence_score(now, prev, 1, now, prev)?);
        }
    }
    // same window the scheduler uses: newest output against up to
    // history_k earlier ones
    let finals: Vec<&Tensor> = steps.iter().map(|s| &s[layers - 1]).collect();
    let mut variations = Vec::new();
    for i in 1..finals.len() {
        let past: Vec<Tensor> = (1..=history_k.min(i))
            .map(|j| finals[i - j].clone())
            .collect();
        variations.push(cumulative_variation(&past, finals[i])?);
    }
    if divergences.is_empty() || variations.is_empty() {
        return Err(Error::config(
            "schedule.steps",
            "calibration needs at least two steps",
        ));
    }
    Ok((divergences, variations))
}

/// Calibrates `model` along the full-precision trajectory drawn with `cfg`'s
/// calibration seed.
pub fn calibrate_model(model: &DiT, sched: &NoiseSchedule, cfg: &RunConfig) -> Result<Calibration> {
    let layers = model.num_blocks();
    let seed = cfg.calibration_seed();
    let mut rec = Recorder {
        stats: ActivationStats::empty(layers),
        step_outputs: Vec::new(),
        ranges: vec![(f32::INFINITY, f32::NEG_INFINITY); layers],
    };
    let mut trajectory: Vec<(usize, Tensor)> = Vec::new();
    generate_with_hooks(model, sched, seed, &mut rec, &mut |t, x| {
        trajectory.push((t, x.clone()))
    })?;

    let cond = NoiseSource::new(seed).cond(model);
    let batch = cfg.calibration.batch_timesteps.min(trajectory.len());
    let samples: Vec<CalibrationSample> = (0..batch)
        .map(|i| {
            let idx = if batch > 1 {
                i * (trajectory.len() - 1) / (batch - 1)
            } else {
                0
            };
            let (t, x) = &trajectory[idx];
            CalibrationSample {
                x_t: x.clone(),
                t: *t,
                cond: cond.clone(),
            }
        })
        .collect();
    let sensitivities = measure_sensitivities(model, &samples)?;
    let weight_plan = allocate_weight_bits(&sensitivities, cfg.weight_budget())?;

    let defaults = ThresholdConfig::default();
    let history_k = cfg.thresholds.history_k.unwrap_or(defaults.history_k);
    let numerics = cfg.quant_options();
    let (divergences, variations) = match numerics {
        None => trajectory_scores(&rec.step_outputs, layers, history_k)?,
        Some(options) => {
            // the deployed numerics at their widest activation setting
            let plan = match &cfg.weight_bits {
                WeightBitsSpec::Plan(p) => p,
                WeightBitsSpec::Auto(_) => &weight_plan,
            };
            let engine = QuantEngine::new(model, Some(plan), Some(&rec.stats), options)?;
            let bits = cfg.thresholds.bit_max.unwrap_or(defaults.bit_max);
            let mut cap = OutputCapture {
                inner: engine.hooks(Some(bits)),
                outputs: Vec::new(),
            };
            generate_with_hooks(model, sched, seed, &mut cap, &mut |_, _| {})?;
            trajectory_scores(&cap.outputs, layers, history_k)?
        }
    };

    Ok(Calibration {
        model_checksum: model.weight_checksum(),
        seed,
        numerics,
        divergence: Percentiles::of(&divergences)?,
        variation: Percentiles::of(&variations)?,
        layers: rec
            .ranges
            .iter()
            .zip(&sensitivities)
            .map(|(&(min, max), &sensitivity)| LayerCalibration {
                min,
                max,
                sensitivity,
            })
            .collect(),
        activation_stats: rec.stats,
        weight_plan,
    })
}

/// Builds the model from `cfg`, calibrates it and writes
/// `<out>/<run_id>/calibration.json` (or `calibration.path` if set).
pub fn calibrate(cfg: &RunConfig) -> Result<(Calibration, std::path::PathBuf)> {
    cfg.validate()?;
    let model = init_model(&cfg.dit_config())?;
    let sched = cfg.noise_schedule()?;
    let cal = calibrate_model(&model, &sched, cfg)?;
    let path = match &cfg.calibration.path {
        Some(p) => p.clone(),
        None => {
            let dir = cfg.output_dir().join(cfg.run_id());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            dir.join("calibration.json")
        }
    };
    cal.save(&path)?;
    Ok((cal, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert_eq!(percentile(&v, 25.0), 2.0);
        assert!((percentile(&v, 33.0) - 2.32).abs() < 1e-12);
        let p = Percentiles::of(&[5.0, 1.0, 3.0]).unwrap();
        assert!(p.p25 <= p.p33 && p.p33 <= p.p50 && p.p50 <= p.p66 && p.p66 <= p.p75);
        assert!(Percentiles::of(&[]).is_err());
    }
}
