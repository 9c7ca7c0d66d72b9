use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::calibrate::{calibrate_model, Calibration};
use super::config::{load_config, save_config, RunConfig, WeightBitsSpec};
use super::metrics::{compare_outputs, write_metrics_csv, RunMetrics};
use super::tensor_io::save_tensor;
use super::trace_io::export_trace;
use crate::error::{Error, Result};
use crate::model::{init_model, DiT};
use crate::quant::{QuantEngine, WeightBitPlan};
use crate::sampler::{generate, Generation, NoiseSchedule};
use crate::scheduler::{Scheduler, ThresholdConfig, Toggles};
use crate::tensor::Tensor;

/// Everything one benchmark invocation produced.
#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub config: RunConfig,
    pub metrics: RunMetrics,
    pub run: Generation,
    pub baseline: Generation,
    pub calibration: Option<Calibration>,
}

impl BenchOutcome {
    pub fn output(&self) -> &Tensor {
        &self.run.output
    }
}

/// Closed-form MAC count of `steps` unscheduled forward passes.
pub fn baseline_macs(model: &DiT, steps: usize) -> u64 {
    steps as u64 * model.config().forward_macs()
}

fn needs_calibration(cfg: &RunConfig) -> bool {
    let t = cfg.toggles;
    let thresholds = (t.hlc || t.srap || t.aigq_acts) && !cfg.thresholds.is_complete();
    let plan = t.aigq_weights && matches!(cfg.weight_bits, WeightBitsSpec::Auto(_));
    thresholds || plan || t.aigq_acts
}

/// Loads the calibration named by the config, or computes it.
pub fn obtain_calibration(
    model: &DiT,
    sched: &NoiseSchedule,
    cfg: &RunConfig,
) -> Result<Calibration> {
    match &cfg.calibration.path {
        Some(path) if path.exists() => {
            let cal = Calibration::load(path)?;
            if cal.model_checksum != model.weight_checksum() {
                return Err(Error::config(
                    "calibration.path",
                    format!("{} was recorded for a different model", path.display()),
                ));
            }
            if cal.numerics != cfg.quant_options() {
                return Err(Error::config(
                    "calibration.path",
                    format!(
                        "{} was measured under different quantization settings",
                        path.display()
                    ),
                ));
            }
            Ok(cal)
        }
        _ => calibrate_model(model, sched, cfg),
    }
}

fn resolve_thresholds(cfg: &RunConfig, cal: Option<&Calibration>) -> Result<ThresholdConfig> {
    let calibrated = cal.map(|c| c.thresholds());
    if calibrated.is_none() && !cfg.thresholds.is_complete() {
        // only reachable when every data-dependent rule is off
        let d = ThresholdConfig::default();
        let fallback = super::config::CalibratedThresholds {
            delta1: d.delta1,
            delta2: d.delta2,
            delta_low: d.delta_low,
            delta_high: d.delta_high,
            divergence_scale: d.divergence_scale,
        };
        return cfg.thresholds.resolve(Some(&fallback));
    }
    cfg.thresholds.resolve(calibrated.as_ref())
}

fn weight_plan<'a>(
    cfg: &'a RunConfig,
    cal: Option<&'a Calibration>,
) -> Result<Option<&'a WeightBitPlan>> {
    if !cfg.toggles.aigq_weights {
        return Ok(None);
    }
    match &cfg.weight_bits {
        WeightBitsSpec::Plan(p) => Ok(Some(p)),
        WeightBitsSpec::Auto(_) => cal
            .map(|c| Some(&c.weight_plan))
            .ok_or_else(|| Error::config("weight_bits", "\"auto\" needs calibration")),
    }
}

/// Runs the baseline (all toggles off) and the configured run with the same
/// seeds, and compares them.
pub fn run_benchmark(cfg: &RunConfig) -> Result<BenchOutcome> {
    cfg.validate()?;
    let model = init_model(&cfg.dit_config())?;
    let sched = cfg.noise_schedule()?;
    let cal = if needs_calibration(cfg) {
        Some(obtain_calibration(&model, &sched, cfg)?)
    } else {
        None
    };
    let thresholds = resolve_thresholds(cfg, cal.as_ref())?;
    let layers = model.num_blocks();
    let steps = sched.steps();
    let wall = cfg.output.wall_clock;

    let mut base_sched = Scheduler::new(
        thresholds.clone(),
        Toggles::none(),
        layers,
        steps,
        cfg.prune_seed(),
    )?;
    let baseline = generate(
        &model,
        &sched,
        &mut base_sched,
        None,
        cfg.sampling_seed(),
        wall,
    )?;
    let expected = baseline_macs(&model, steps);
    if baseline.trace.executed_macs() != expected {
        return Err(Error::Input(format!(
            "baseline counted {} MACs, closed form is {expected}",
            baseline.trace.executed_macs()
        )));
    }

    let t = cfg.toggles;
    let engine = match cfg.quant_options() {
        Some(options) => {
            let stats = cal.as_ref().map(|c| &c.activation_stats);
            Some(QuantEngine::new(
                &model,
                weight_plan(cfg, cal.as_ref())?,
                stats,
                options,
            )?)
        }
        None => None,
    };
    let mut scheduler = Scheduler::new(thresholds, t, layers, steps, cfg.prune_seed())?;
    if let Some(e) = &engine {
        scheduler.set_weight_bits((0..layers).map(|l| e.weight_bits(l)).collect());
    }
    let run = generate(
        &model,
        &sched,
        &mut scheduler,
        engine.as_ref(),
        cfg.sampling_seed(),
        wall,
    )?;

    let (mse, psnr) = compare_outputs(&baseline.output, &run.output)?;
    let executed_macs = run.trace.executed_macs();
    let executed_bit_macs = run.trace.executed_bit_macs();
    let baseline_bit_macs = baseline.trace.executed_bit_macs();
    let metrics = RunMetrics {
        run_id: cfg.run_id(),
        toggles: t.label(),
        executed_macs,
        baseline_macs: expected,
        speedup_mac: expected as f64 / executed_macs as f64,
        executed_bit_macs,
        baseline_bit_macs,
        speedup_bit_mac: baseline_bit_macs as f64 / executed_bit_macs as f64,
        wall_time_ms: wall.then_some(run.wall_time_ms),
        baseline_wall_time_ms: wall.then_some(baseline.wall_time_ms),
        speedup_wall: wall.then(|| baseline.wall_time_ms / run.wall_time_ms),
        mse,
        psnr,
    };
    Ok(BenchOutcome {
        config: cfg.clone(),
        metrics,
        run,
        baseline,
        calibration: cal,
    })
}

/// Writes `config.json`, `trace.jsonl`, `metrics.csv`, `metrics.json`,
/// `output.bin` and `baseline.bin` under `<out>/<run_id>/`.
pub fn write_outcome(outcome: &BenchOutcome) -> Result<PathBuf> {
    let dir = outcome.config.output_dir().join(outcome.config.run_id());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    save_config(&outcome.config, &dir.join("config.json"))?;
    export_trace(&outcome.run.trace, &dir.join("trace.jsonl"))?;
    write_metrics_csv(
        std::slice::from_ref(&outcome.metrics),
        &dir.join("metrics.csv"),
    )?;
    let json = serde_json::to_string_pretty(&outcome.metrics)? + "\n";
    let path = dir.join("metrics.json");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    save_tensor(&outcome.run.output, &dir.join("output.bin"))?;
    save_tensor(&outcome.baseline.output, &dir.join("baseline.bin"))?;
    if let Some(cal) = &outcome.calibration {
        cal.save(&dir.join("calibration.json"))?;
    }
    Ok(dir)
}

/// Sweep file: a JSON list whose entries are either inline configs or paths
/// (relative to the sweep file) of config files.
pub fn load_sweep(path: &Path) -> Result<Vec<RunConfig>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<serde_json::Value> = serde_json::from_str(&text)?;
    if entries.is_empty() {
        return Err(Error::config("sweep", "no configurations listed"));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let configs: Vec<RunConfig> = entries
        .into_iter()
        .map(|v| match v {
            serde_json::Value::String(p) => load_config(&base.join(p)),
            other => RunConfig::from_json(&other.to_string()),
        })
        .collect::<Result<_>>()?;
    let mut ids: Vec<String> = configs.iter().map(|c| c.run_id()).collect();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::config(
            "output.run_id",
            format!("{} appears twice in the sweep", w[0]),
        ));
    }
    Ok(configs)
}

/// Runs every configuration in parallel, writes each run's files, then the
/// merged `sweep.csv` in listing order.
pub fn run_sweep(configs: &[RunConfig], merged: &Path) -> Result<Vec<RunMetrics>> {
    let outcomes: Vec<RunMetrics> = configs
        .par_iter()
        .map(|c| {
            let o = run_benchmark(c)?;
            write_outcome(&o)?;
            Ok(o.metrics)
        })
        .collect::<Result<_>>()?;
    if let Some(dir) = merged.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_metrics_csv(&outcomes, merged)?;
    Ok(outcomes)
}
