//! Per-step compute planning: which blocks to recompute, reuse from the
//! feature cache, or bypass, and at what activation precision.
//!
//! A step is driven in three phases: [`Scheduler::plan_step`] fixes every
//! decision from what earlier steps measured, [`StepHooks`] applies the plan
//! inside the forward pass, and [`Scheduler::observe`] measures the new
//! features, refreshes the cache and emits trace records.

mod config;
pub mod policy;
mod trace;

pub use config::ThresholdConfig;
pub use policy::{
    activation_bits, adapt_prune_rate, cumulative_variation, divergence_score, layer_similarity,
    prune_draw, prune_probability, redundancy_metric, refresh_interval,
};
pub use trace::{Action, Trace, TraceHeader, TraceRecord};

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockOverride, LayerHooks, LinearSite};
use crate::quant::{LinearPrecision, QuantEngine};
use crate::tensor::{matmul_fp, Tensor};

/// Operand width billed for a floating-point MAC.
pub const FLOAT_MAC_WIDTH: u64 = 16;

/// Independent switches for the three mechanisms.
/// Switches missing from a serialized value are off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// Reuse cached block residuals between refreshes.
    pub hlc: bool,
    /// Mixed-precision weights.
    pub aigq_weights: bool,
    /// Balanced, per-step activation quantization.
    pub aigq_acts: bool,
    /// Similarity-driven block bypass.
    pub srap: bool,
}

impl Toggles {
    pub fn all() -> Self {
        Self {
            hlc: true,
            aigq_weights: true,
            aigq_acts: true,
            srap: true,
        }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn any(&self) -> bool {
        self.hlc || self.aigq_weights || self.aigq_acts || self.srap
    }

    /// Short `+`-joined label, `none` when everything is off.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.hlc, "hlc"),
            (self.aigq_weights, "aigq_w"),
            (self.aigq_acts, "aigq_a"),
            (self.srap, "srap"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// A block's cached output at step `step`.
///
/// The residual `output − input` is what reuse replays: the block's current
/// input plus the cached residual.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub output: Tensor,
    pub residual: Tensor,
    pub step: usize,
    pub tau: usize,
}

impl CacheEntry {
    pub fn age(&self, t: usize) -> usize {
        self.step - t
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureCache {
    entries: Vec<Option<CacheEntry>>,
}

impl FeatureCache {
    pub fn new(layers: usize) -> Self {
        Self {
            entries: vec![None; layers],
        }
    }

    pub fn get(&self, layer: usize) -> Option<&CacheEntry> {
        self.entries.get(layer).and_then(|e| e.as_ref())
    }

    /// Live at `t`: present and younger than its interval.
    pub fn live(&self, layer: usize, t: usize) -> Option<&CacheEntry> {
        self.get(layer).filter(|e| e.age(t) < e.tau)
    }

    fn insert(&mut self, layer: usize, entry: CacheEntry) {
        self.entries[layer] = Some(entry);
    }
}

/// Plan for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub action: Action,
    pub age: Option<usize>,
    pub tau: Option<usize>,
    pub similarity: Option<f64>,
    pub p_prune: Option<f64>,
    pub draw: Option<f64>,
}

/// Everything decided for one denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleDecision {
    pub t: usize,
    pub layers: Vec<LayerPlan>,
    pub activation_bits: Option<u8>,
    pub variation: Option<f64>,
    /// Divergences measured once the step has run.
    pub divergences: Vec<Option<f64>>,
    pub new_taus: Vec<Option<usize>>,
}

impl ScheduleDecision {
    pub fn action(&self, layer: usize) -> Action {
        self.layers[layer].action
    }
}

/// What a forward pass under [`StepHooks`] produced.
#[derive(Debug, Clone)]
pub struct StepObservation {
    pub inputs: Vec<Option<Tensor>>,
    pub outputs: Vec<Option<Tensor>>,
    pub macs: Vec<u64>,
    pub bit_macs: Vec<u64>,
    pub head_macs: u64,
    pub wall_us: Option<Vec<u64>>,
}

pub struct Scheduler {
    cfg: ThresholdConfig,
    toggles: Toggles,
    layers: usize,
    timesteps: usize,
    prune_seed: u64,
    weight_bits: Vec<Option<u8>>,
    cache: FeatureCache,
    prev_outputs: Vec<Option<Tensor>>,
    latest_divergence: Vec<Option<f64>>,
    similarity: Vec<Option<f64>>,
    /// Final block outputs, newest first.
    history: VecDeque<Tensor>,
}

impl Scheduler {
    pub fn new(
        cfg: ThresholdConfig,
        toggles: Toggles,
        layers: usize,
        timesteps: usize,
        prune_seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if layers == 0 || timesteps == 0 {
            return Err(Error::config(
                "model",
                "scheduler needs at least one layer and one step",
            ));
        }
        Ok(Self {
            cfg,
            toggles,
            layers,
            timesteps,
            prune_seed,
            weight_bits: vec![None; layers],
            cache: FeatureCache::new(layers),
            prev_outputs: vec![None; layers],
            latest_divergence: vec![None; layers],
            similarity: vec![None; layers],
            history: VecDeque::new(),
        })
    }

    /// Weight bit-widths to report in the trace.
    pub fn set_weight_bits(&mut self, bits: Vec<Option<u8>>) {
        self.weight_bits = bits;
    }

    pub fn thresholds(&self) -> &ThresholdConfig {
        &self.cfg
    }

    pub fn toggles(&self) -> Toggles {
        self.toggles
    }

    pub fn cache(&self) -> &FeatureCache {
        &self.cache
    }

    pub fn header(&self) -> TraceHeader {
        TraceHeader {
            layers: self.layers,
            timesteps: self.timesteps,
            prune_seed: self.prune_seed,
            toggles: self.toggles,
            thresholds: self.cfg.clone(),
            block_macs: 0,
            head_macs: 0,
        }
    }

    /// First and last denoising steps run the full model.
    pub fn is_protected(&self, t: usize) -> bool {
        t + 1 == self.timesteps || t == 0
    }

    fn current_variation(&self) -> Result<Option<f64>> {
        if self.history.len() < 2 {
            return Ok(None);
        }
        let current = &self.history[0];
        let past: Vec<Tensor> = self.history.iter().skip(1).cloned().collect();
        cumulative_variation(&past, current).map(Some)
    }

    pub fn plan_step(&self, t: usize) -> Result<ScheduleDecision> {
        if t >= self.timesteps {
            return Err(Error::Input(format!(
                "step {t} outside [0, {})",
                self.timesteps
            )));
        }
        let protected = self.is_protected(t);
        let variation = self.current_variation()?;
        let p_base = variation.map_or(self.cfg.p_base, |v| adapt_prune_rate(v, &self.cfg));
        let prune_cfg = ThresholdConfig {
            p_base,
            ..self.cfg.clone()
        };

        let mut layers = Vec::with_capacity(self.layers);
        let mut post_skip = false;
        for l in 0..self.layers {
            let entry = self.cache.get(l);
            let age = entry.map(|e| e.age(t));
            let tau = entry.map(|e| e.tau);
            let reuse = self.toggles.hlc && !protected && self.cache.live(l, t).is_some();
            let mut plan = LayerPlan {
                action: if reuse {
                    Action::Reuse
                } else {
                    Action::Recompute
                },
                age,
                tau,
                similarity: None,
                p_prune: None,
                draw: None,
            };
            if !reuse {
                if let Some(e) = entry {
                    if self.toggles.hlc
                        && e.tau == self.cfg.tau_max
                        && self.cfg.tau_max > 1
                        && e.age(t) == e.tau
                    {
                        post_skip = true;
                    }
                }
                if self.toggles.srap && !protected && l > 0 {
                    let s = self.similarity[l];
                    let p = s.map_or(0.0, |s| prune_probability(s, &prune_cfg));
                    let u = prune_draw(self.prune_seed, t, l);
                    plan.similarity = s;
                    plan.p_prune = Some(p);
                    plan.draw = Some(u);
                    if u < p {
                        plan.action = Action::Prune;
                    }
                }
            }
            layers.push(plan);
        }

        let activation_bits = if !self.toggles.aigq_acts {
            None
        } else if protected || post_skip {
            Some(self.cfg.bit_max)
        } else {
            let scaled: Vec<f64> = self
                .latest_divergence
                .iter()
                .flatten()
                .map(|d| d / self.cfg.divergence_scale)
                .collect();
            if scaled.is_empty() {
                Some(self.cfg.bit_max)
            } else {
                Some(activation_bits(redundancy_metric(&scaled)?, &self.cfg))
            }
        };

        Ok(ScheduleDecision {
            t,
            layers,
            activation_bits,
            variation,
            divergences: vec![None; self.layers],
            new_taus: vec![None; self.layers],
        })
    }

    /// Folds a finished step into the cache and history and returns its
    /// trace records (one per block, then the head).
    pub fn observe(
        &mut self,
        decision: &mut ScheduleDecision,
        obs: StepObservation,
    ) -> Result<Vec<TraceRecord>> {
        let t = decision.t;
        let StepObservation {
            inputs,
            outputs,
            macs,
            bit_macs,
            head_macs,
            wall_us,
        } = obs;
        let mut records = Vec::with_capacity(self.layers + 1);
        for l in 0..self.layers {
            let input = inputs[l]
                .as_ref()
                .ok_or_else(|| Error::Input(format!("block {l} never ran at step {t}")))?;
            let output = outputs[l]
                .as_ref()
                .ok_or_else(|| Error::Input(format!("block {l} produced no output at step {t}")))?;
            let plan = &decision.layers[l];
            if plan.action == Action::Recompute {
                let divergence = match (self.cache.get(l), &self.prev_outputs[l]) {
                    (Some(e), Some(prev)) => {
                        Some(divergence_score(output, &e.output, e.age(t), output, prev)?)
                    }
                    _ => None,
                };
                let tau = divergence.map_or(self.cfg.tau_min, |d| refresh_interval(d, &self.cfg));
                self.cache.insert(
                    l,
                    CacheEntry {
                        output: output.clone(),
                        residual: output.sub(input)?,
                        step: t,
                        tau,
                    },
                );
                if divergence.is_some() {
                    self.latest_divergence[l] = divergence;
                }
                decision.divergences[l] = divergence;
                decision.new_taus[l] = Some(tau);
            }
            if plan.action != Action::Prune && l > 0 {
                self.similarity[l] = Some(layer_similarity(input, output)?);
            }
            records.push(TraceRecord {
                t,
                layer: l,
                action: plan.action,
                divergence: decision.divergences[l],
                similarity: plan.similarity,
                bits: decision.activation_bits,
                weight_bits: self.weight_bits[l],
                macs: macs[l],
                bit_macs: bit_macs[l],
                age: plan.age,
                tau: plan.tau,
                new_tau: decision.new_taus[l],
                variation: decision.variation,
                p_prune: plan.p_prune,
                draw: plan.draw,
                wall_us: wall_us.as_ref().map(|w| w[l]),
            });
            if plan.action != Action::Recompute && macs[l] != 0 {
                return Err(Error::Input(format!(
                    "block {l} was {:?} but billed {} MACs",
                    plan.action, macs[l]
                )));
            }
        }
        for (l, out) in outputs.into_iter().enumerate() {
            self.prev_outputs[l] = out;
        }
        let last = self.prev_outputs[self.layers - 1]
            .clone()
            .expect("checked above");
        self.history.push_front(last);
        self.history.truncate(self.cfg.history_k + 1);
        records.push(TraceRecord {
            t,
            layer: self.layers,
            action: Action::Head,
            divergence: None,
            similarity: None,
            bits: None,
            weight_bits: None,
            macs: head_macs,
            bit_macs: head_macs * FLOAT_MAC_WIDTH,
            age: None,
            tau: None,
            new_tau: None,
            variation: None,
            p_prune: None,
            draw: None,
            wall_us: wall_us.as_ref().map(|w| w[self.layers]),
        });
        Ok(records)
    }
}

/// Applies one [`ScheduleDecision`] inside a forward pass.
pub struct StepHooks<'a> {
    decision: &'a ScheduleDecision,
    cache: &'a FeatureCache,
    engine: Option<&'a QuantEngine>,
    inputs: Vec<Option<Tensor>>,
    outputs: Vec<Option<Tensor>>,
    macs: Vec<u64>,
    linear_macs: Vec<u64>,
    linear_bit_macs: Vec<u64>,
    bit_macs: Vec<u64>,
    head_macs: u64,
    clock: Option<(Instant, Vec<u64>)>,
}

impl<'a> StepHooks<'a> {
    pub fn new(
        scheduler: &'a Scheduler,
        decision: &'a ScheduleDecision,
        engine: Option<&'a QuantEngine>,
        wall_clock: bool,
    ) -> Self {
        let n = scheduler.layers;
        Self {
            decision,
            cache: &scheduler.cache,
            engine,
            inputs: vec![None; n],
            outputs: vec![None; n],
            macs: vec![0; n],
            linear_macs: vec![0; n],
            linear_bit_macs: vec![0; n],
            bit_macs: vec![0; n],
            head_macs: 0,
            clock: wall_clock.then(|| (Instant::now(), vec![0; n + 1])),
        }
    }

    pub fn finish(self) -> StepObservation {
        StepObservation {
            inputs: self.inputs,
            outputs: self.outputs,
            macs: self.macs,
            bit_macs: self.bit_macs,
            head_macs: self.head_macs,
            wall_us: self.clock.map(|(_, w)| w),
        }
    }

    fn start_clock(&mut self) {
        if let Some((start, _)) = &mut self.clock {
            *start = Instant::now();
        }
    }

    fn lap(&mut self, slot: usize) {
        if let Some((start, slots)) = &mut self.clock {
            slots[slot] = start.elapsed().as_micros() as u64;
            *start = Instant::now();
        }
    }
}

impl LayerHooks for StepHooks<'_> {
    fn before_block(&mut self, layer: usize, input: &Tensor) -> Result<BlockOverride> {
        self.start_clock();
        Ok(match self.decision.action(layer) {
            Action::Recompute | Action::Head => BlockOverride::Run,
            Action::Reuse => {
                let entry = self.cache.live(layer, self.decision.t).ok_or_else(|| {
                    Error::Input(format!("reuse of block {layer} without a live entry"))
                })?;
                BlockOverride::Replace(input.add(&entry.residual)?)
            }
            Action::Prune => BlockOverride::Replace(input.clone()),
        })
    }

    fn after_block(&mut self, layer: usize, input: &Tensor, output: &Tensor) -> Result<()> {
        self.lap(layer);
        self.inputs[layer] = Some(input.clone());
        self.outputs[layer] = Some(output.clone());
        Ok(())
    }

    fn linear(&mut self, site: LinearSite, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let macs = (x.rows() * x.last_dim() * w.last_dim()) as u64;
        let (y, precision) = match self.engine {
            Some(e) => e.linear(site, x, self.decision.activation_bits)?,
            None => (matmul_fp(x, w)?, LinearPrecision::Float),
        };
        let width = match precision {
            LinearPrecision::Float => FLOAT_MAC_WIDTH,
            LinearPrecision::Integer(a, b) => a.max(b) as u64,
        };
        self.linear_macs[site.layer] += macs;
        self.linear_bit_macs[site.layer] += macs * width;
        Ok(y)
    }

    fn record_macs(&mut self, layer: Option<usize>, macs: u64) {
        match layer {
            Some(l) => {
                self.macs[l] += macs;
                self.bit_macs[l] +=
                    (macs - self.linear_macs[l]) * FLOAT_MAC_WIDTH + self.linear_bit_macs[l];
                self.linear_macs[l] = 0;
                self.linear_bit_macs[l] = 0;
            }
            None => {
                self.head_macs += macs;
                let n = self.macs.len();
                self.lap(n);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, DiT, DiTConfig, NoHooks};

    fn model() -> DiT {
        init_model(&DiTConfig {
            num_blocks: 4,
            model_dim: 8,
            num_heads: 2,
            tokens_per_frame: 2,
            frames: 2,
            cond_dim: 4,
            cond_tokens: 1,
            timesteps: 10,
            seed: 2,
        })
        .unwrap()
    }

    fn latent(m: &DiT, t: usize) -> Tensor {
        let shape = m.config().latent_shape();
        let n: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..n)
                .map(|i| ((i as f32) * 0.3 + t as f32 * 0.05).sin())
                .collect(),
        )
        .unwrap()
    }

    fn run(
        m: &DiT,
        s: &mut Scheduler,
        steps: usize,
    ) -> (Vec<Tensor>, Vec<TraceRecord>, Vec<ScheduleDecision>) {
        let cond = Tensor::filled(&m.config().cond_shape(), 0.2);
        let mut outs = Vec::new();
        let mut recs = Vec::new();
        let mut decisions = Vec::new();
        for t in (m.config().timesteps - steps..m.config().timesteps).rev() {
            let mut d = s.plan_step(t).unwrap();
            let mut hooks = StepHooks::new(s, &d, None, false);
            outs.push(
                m.predict_noise(&latent(m, t), t, &cond, &mut hooks)
                    .unwrap(),
            );
            let obs = hooks.finish();
            recs.extend(s.observe(&mut d, obs).unwrap());
            decisions.push(d);
        }
        (outs, recs, decisions)
    }

    #[test]
    fn disabled_scheduler_is_transparent() {
        let m = model();
        let mut s = Scheduler::new(ThresholdConfig::default(), Toggles::none(), 4, 10, 0).unwrap();
        let (outs, recs, _) = run(&m, &mut s, 10);
        let cond = Tensor::filled(&m.config().cond_shape(), 0.2);
        for (i, t) in (0..10).rev().enumerate() {
            let plain = m
                .predict_noise(&latent(&m, t), t, &cond, &mut NoHooks)
                .unwrap();
            assert_eq!(plain.max_abs_diff(&outs[i]).unwrap(), 0.0);
        }
        let per_step = m.config().forward_macs();
        assert_eq!(recs.iter().map(|r| r.macs).sum::<u64>(), 10 * per_step);
        assert!(recs
            .iter()
            .all(|r| matches!(r.action, Action::Recompute | Action::Head)));
    }

    #[test]
    fn huge_delta_reuses_until_expiry() {
        let m = model();
        let cfg = ThresholdConfig {
            delta1: 1e30,
            delta2: 1e30,
            ..Default::default()
        };
        let toggles = Toggles {
            hlc: true,
            ..Toggles::none()
        };
        let mut s = Scheduler::new(cfg.clone(), toggles, 4, 10, 0).unwrap();
        let (_, _, decisions) = run(&m, &mut s, 10);
        // t=9 first step (τ_min), t=8 recompute with D → τ_max, then reuse
        // for τ_max − 1 steps, refresh at t=2, protected final step
        let actions: Vec<Action> = decisions.iter().map(|d| d.action(0)).collect();
        use Action::*;
        assert_eq!(
            actions,
            vec![
                Recompute, Recompute, Reuse, Reuse, Reuse, Reuse, Reuse, Recompute, Reuse,
                Recompute
            ]
        );
        for d in &decisions {
            assert!(d.layers.iter().all(|p| p.action == d.layers[0].action));
        }
    }

    #[test]
    fn reuse_replays_the_cached_residual() {
        let m = model();
        let cfg = ThresholdConfig {
            delta1: 1e30,
            delta2: 1e30,
            ..Default::default()
        };
        let toggles = Toggles {
            hlc: true,
            ..Toggles::none()
        };
        let mut s = Scheduler::new(cfg, toggles, 4, 10, 0).unwrap();
        let cond = Tensor::filled(&m.config().cond_shape(), 0.2);
        for t in [9, 8] {
            let mut d = s.plan_step(t).unwrap();
            let mut h = StepHooks::new(&s, &d, None, false);
            m.predict_noise(&latent(&m, t), t, &cond, &mut h).unwrap();
            let obs = h.finish();
            s.observe(&mut d, obs).unwrap();
        }
        let residual = s.cache().get(0).unwrap().residual.clone();
        let d = s.plan_step(7).unwrap();
        assert_eq!(d.action(0), Action::Reuse);
        let mut h = StepHooks::new(&s, &d, None, false);
        m.predict_noise(&latent(&m, 7), 7, &cond, &mut h).unwrap();
        let obs = h.finish();
        let x0 = obs.inputs[0].as_ref().unwrap();
        assert_eq!(
            obs.outputs[0].as_ref().unwrap(),
            &x0.add(&residual).unwrap()
        );
        assert!(obs.macs.iter().all(|&m| m == 0));
    }

    #[test]
    fn unit_intervals_and_no_pruning_match_baseline_plan() {
        let m = model();
        let cfg = ThresholdConfig {
            tau_max: 1,
            tau_mid: 1,
            tau_min: 1,
            tau_high: 2.0,
            p_base: 0.0,
            ..Default::default()
        };
        let mut s = Scheduler::new(
            cfg,
            Toggles {
                aigq_weights: false,
                aigq_acts: false,
                ..Toggles::all()
            },
            4,
            10,
            3,
        )
        .unwrap();
        let (_, recs, _) = run(&m, &mut s, 10);
        assert!(recs
            .iter()
            .all(|r| matches!(r.action, Action::Recompute | Action::Head)));
    }

    #[test]
    fn forced_pruning_bypasses_blocks() {
        let m = model();
        let cfg = ThresholdConfig {
            tau_high: -1.0,
            tau_low: -1.0,
            ..Default::default()
        };
        let toggles = Toggles {
            srap: true,
            ..Toggles::none()
        };
        let mut s = Scheduler::new(cfg, toggles, 4, 10, 3).unwrap();
        let (_, recs, _) = run(&m, &mut s, 10);
        for r in &recs {
            let protected = r.t == 9 || r.t == 0;
            let expect = if r.layer == 4 {
                Action::Head
            } else if r.layer == 0 || protected {
                Action::Recompute
            } else {
                Action::Prune
            };
            assert_eq!(r.action, expect, "t={} l={}", r.t, r.layer);
            if r.action == Action::Prune {
                assert_eq!(r.macs, 0);
            }
        }
    }

    #[test]
    fn protected_steps_are_full_precision_recomputes() {
        let m = model();
        let mut s = Scheduler::new(
            ThresholdConfig::default(),
            Toggles {
                aigq_weights: false,
                ..Toggles::all()
            },
            4,
            10,
            1,
        )
        .unwrap();
        let (_, recs, _) = run(&m, &mut s, 10);
        for r in recs
            .iter()
            .filter(|r| (r.t == 9 || r.t == 0) && r.layer < 4)
        {
            assert_eq!(r.action, Action::Recompute);
            assert_eq!(r.bits, Some(8));
        }
    }

    #[test]
    fn identical_runs_give_identical_traces() {
        let m = model();
        let mk = || {
            Scheduler::new(
                ThresholdConfig::default(),
                Toggles {
                    aigq_weights: false,
                    aigq_acts: false,
                    ..Toggles::all()
                },
                4,
                10,
                9,
            )
            .unwrap()
        };
        let (o1, r1, _) = run(&m, &mut mk(), 10);
        let (o2, r2, _) = run(&m, &mut mk(), 10);
        assert_eq!(o1, o2);
        assert_eq!(r1, r2);
    }
}
