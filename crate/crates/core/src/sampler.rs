//! DDPM forward noising and ε-parameterised ancestral sampling.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DiT, LayerHooks, NoHooks};
use crate::quant::QuantEngine;
use crate::scheduler::{Scheduler, StepHooks, Trace};
use crate::tensor::Tensor;

/// Cumulative signal fractions `ᾱ_t`, `t = 0 … T−1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl TryFrom<Vec<f64>> for NoiseSchedule {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        NoiseSchedule::from_alpha_bar(v)
    }
}

impl From<NoiseSchedule> for Vec<f64> {
    fn from(s: NoiseSchedule) -> Self {
        s.alpha_bar
    }
}

impl NoiseSchedule {
    /// Checks `0 < ᾱ_t < ᾱ_{t−1} ≤ 1`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::config(
                "schedule.steps",
                "schedule needs at least one step",
            ));
        }
        if !(alpha_bar[0] > 0.0 && alpha_bar[0] <= 1.0) {
            return Err(Error::config(
                "schedule",
                format!("alpha_bar[0] = {} outside (0, 1]", alpha_bar[0]),
            ));
        }
        for t in 1..alpha_bar.len() {
            if !(alpha_bar[t] > 0.0 && alpha_bar[t] < alpha_bar[t - 1]) {
                return Err(Error::config(
                    "schedule",
                    format!(
                        "alpha_bar must decrease strictly and stay positive: [{}] = {}, [{}] = {}",
                        t - 1,
                        alpha_bar[t - 1],
                        t,
                        alpha_bar[t]
                    ),
                ));
            }
        }
        Ok(Self { alpha_bar })
    }

    /// Linear `β` from `beta_start` to `beta_end`, `ᾱ_t = Π_{s≤t} (1 − β_s)`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule.steps", "must be positive"));
        }
        for (field, b) in [
            ("schedule.beta_start", beta_start),
            ("schedule.beta_end", beta_end),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(field, format!("{b} outside (0, 1)")));
            }
        }
        let mut acc = 1.0;
        let alpha_bar = (0..steps)
            .map(|t| {
                let beta = if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                };
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Input(format!(
                "timestep {t} outside [0, {})",
                self.steps()
            )));
        }
        Ok(())
    }
}

fn combine(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (ca * x as f64 + cb * y as f64) as f32)
        .collect();
    let out = Tensor::new(a.shape().to_vec(), data)?;
    match a.frame_axis() {
        Some(axis) => out.with_frame_axis(axis),
        None => Ok(out),
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Clean-sample estimate `(x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    combine(
        x_t,
        1.0 / ab.sqrt(),
        eps_hat,
        -(1.0 - ab).sqrt() / ab.sqrt(),
    )
}

/// One ancestral step `t → t−1`: the posterior mean of `q(x_{t−1} | x_t, x̂0)`
/// plus `√β̃_t·noise` (no noise on the step into `t = 0`).
pub fn reverse_step(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if t == 0 {
        return Err(Error::Input("reverse step needs t ≥ 1".into()));
    }
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let alpha = ab / ab_prev;
    let beta = 1.0 - alpha;
    let x0 = predict_x0(x_t, t, eps_hat, sched)?;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mean = combine(&x0, c0, x_t, ct)?;
    if t == 1 {
        return Ok(mean);
    }
    let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
    combine(&mean, 1.0, noise, var.sqrt())
}

/// Counter-keyed Gaussian draws for a generation run.
pub struct NoiseSource {
    seed: u64,
}

impl NoiseSource {
    pub const STREAM_INITIAL: u64 = 0;
    pub const STREAM_COND: u64 = 1;

    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn gaussian(&self, stream: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f32 = StandardNormal.sample(&mut rng);
                v
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("finite gaussian draws")
    }

    pub fn initial(&self, model: &DiT) -> Tensor {
        self.gaussian(Self::STREAM_INITIAL, &model.config().latent_shape())
            .with_frame_axis(0)
            .expect("rank 3")
    }

    pub fn cond(&self, model: &DiT) -> Tensor {
        self.gaussian(Self::STREAM_COND, &model.config().cond_shape())
    }

    /// Noise injected on the step out of `t`.
    pub fn step(&self, model: &DiT, t: usize) -> Tensor {
        self.gaussian(2 + t as u64, &model.config().latent_shape())
            .with_frame_axis(0)
            .expect("rank 3")
    }
}

/// Result of one scheduled generation.
#[derive(Debug, Clone)]
pub struct Generation {
    pub output: Tensor,
    pub trace: Trace,
    pub wall_time_ms: f64,
}

fn check_consistent(model: &DiT, sched: &NoiseSchedule) -> Result<()> {
    if model.config().timesteps != sched.steps() {
        return Err(Error::config(
            "schedule.steps",
            format!(
                "model embeds {} timesteps, schedule has {}",
                model.config().timesteps,
                sched.steps()
            ),
        ));
    }
    Ok(())
}

/// Full ancestral sampling from `x_T ~ N(0, I)` under a scheduler.
///
/// One model evaluation per timestep `T−1 … 0`; the last one returns the
/// clean estimate `x̂0` directly.
pub fn generate(
    model: &DiT,
    sched: &NoiseSchedule,
    scheduler: &mut Scheduler,
    engine: Option<&QuantEngine>,
    seed: u64,
    wall_clock: bool,
) -> Result<Generation> {
    check_consistent(model, sched)?;
    let mut header = scheduler.header();
    header.block_macs = model.config().block_macs();
    header.head_macs = model.config().head_macs();
    if header.layers != model.num_blocks() || header.timesteps != sched.steps() {
        return Err(Error::config(
            "scheduler",
            format!(
                "scheduler sized for {} layers × {} steps, model has {} × {}",
                header.layers,
                header.timesteps,
                model.num_blocks(),
                sched.steps()
            ),
        ));
    }
    let noise = NoiseSource::new(seed);
    let cond = noise.cond(model);
    let mut x = noise.initial(model);
    let mut records = Vec::with_capacity(sched.steps() * (model.num_blocks() + 1));
    let start = Instant::now();
    for t in (0..sched.steps()).rev() {
        let mut decision = scheduler.plan_step(t)?;
        let mut hooks = StepHooks::new(scheduler, &decision, engine, wall_clock);
        let eps = model.predict_noise(&x, t, &cond, &mut hooks)?;
        let obs = hooks.finish();
        records.extend(scheduler.observe(&mut decision, obs)?);
        x = if t == 0 {
            predict_x0(&x, 0, &eps, sched)?
        } else {
            reverse_step(&x, t, &eps, sched, &noise.step(model, t))?
        };
    }
    Ok(Generation {
        output: x,
        trace: Trace { header, records },
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// The same loop with no scheduler at all.
pub fn generate_plain(model: &DiT, sched: &NoiseSchedule, seed: u64) -> Result<Tensor> {
    generate_with_hooks(model, sched, seed, &mut NoHooks, &mut |_, _| {})
}

/// The plain loop with caller-supplied hooks; `visit` sees every `(t, x_t)`
/// before the model does.
pub fn generate_with_hooks(
    model: &DiT,
    sched: &NoiseSchedule,
    seed: u64,
    hooks: &mut dyn LayerHooks,
    visit: &mut dyn FnMut(usize, &Tensor),
) -> Result<Tensor> {
    check_consistent(model, sched)?;
    let noise = NoiseSource::new(seed);
    let cond = noise.cond(model);
    let mut x = noise.initial(model);
    for t in (0..sched.steps()).rev() {
        visit(t, &x);
        let eps = model.predict_noise(&x, t, &cond, hooks)?;
        x = if t == 0 {
            predict_x0(&x, 0, &eps, sched)?
        } else {
            reverse_step(&x, t, &eps, sched, &noise.step(model, t))?
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f32]) -> Tensor {
        Tensor::new(vec![values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn linear_schedule_is_monotone() {
        let s = NoiseSchedule::linear(50, 1e-4, 2e-2).unwrap();
        assert_eq!(s.steps(), 50);
        assert!((s.alpha_bar(0) - (1.0 - 1e-4)).abs() < 1e-15);
        assert!(s.alpha_bar(49) < s.alpha_bar(48));
    }

    #[test]
    fn non_monotone_schedule_rejected() {
        assert!(matches!(
            NoiseSchedule::from_alpha_bar(vec![0.9, 0.95]),
            Err(Error::Config { .. })
        ));
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.0]).is_err());
        assert!(serde_json::from_str::<NoiseSchedule>("[0.5, 0.6]").is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25, 1e-12]).unwrap();
        let x0 = v(&[2.0, 0.0]);
        let eps = v(&[0.0, 2.0]);
        assert_eq!(forward_noise(&x0, 0, &eps, &s).unwrap(), x0);
        let x = forward_noise(&x0, 1, &eps, &s).unwrap();
        assert!((x.data()[0] - 1.0).abs() < 1e-6 && (x.data()[1] - 3f32.sqrt()).abs() < 1e-6);
        let x = forward_noise(&x0, 2, &eps, &s).unwrap();
        assert!(x.max_abs_diff(&eps).unwrap() < 1e-5);
        assert!(forward_noise(&x0, 3, &eps, &s).is_err());
    }

    #[test]
    fn true_noise_gives_analytic_posterior() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let x0 = v(&[0.5, -1.25, 2.0]);
        let eps = v(&[1.0, 0.3, -0.7]);
        let t = 6;
        let xt = forward_noise(&x0, t, &eps, &s).unwrap();
        let zero = v(&[0.0; 3]);
        let got = reverse_step(&xt, t, &eps, &s, &zero).unwrap();
        let (ab, abp) = (s.alpha_bar(t), s.alpha_bar(t - 1));
        let beta = 1.0 - ab / abp;
        for i in 0..3 {
            let mean = abp.sqrt() * beta / (1.0 - ab) * x0.data()[i] as f64
                + (1.0 - beta).sqrt() * (1.0 - abp) / (1.0 - ab) * xt.data()[i] as f64;
            assert!((got.data()[i] as f64 - mean).abs() < 1e-5);
        }
    }

    #[test]
    fn last_reverse_step_is_noise_free() {
        let s = NoiseSchedule::from_alpha_bar(vec![0.99, 0.9]).unwrap();
        let x = v(&[1.0, -1.0]);
        let e = v(&[0.1, 0.2]);
        let a = reverse_step(&x, 1, &e, &s, &v(&[5.0, 5.0])).unwrap();
        let b = reverse_step(&x, 1, &e, &s, &v(&[-3.0, 0.0])).unwrap();
        assert_eq!(a, b);
        assert!(reverse_step(&x, 0, &e, &s, &e).is_err());
    }

    #[test]
    fn noise_enters_with_posterior_std() {
        let s = NoiseSchedule::linear(5, 1e-3, 0.1).unwrap();
        let x = v(&[0.0]);
        let e = v(&[0.0]);
        let a = reverse_step(&x, 3, &e, &s, &v(&[0.0])).unwrap();
        let b = reverse_step(&x, 3, &e, &s, &v(&[1.0])).unwrap();
        let (ab, abp) = (s.alpha_bar(3), s.alpha_bar(2));
        let var = (1.0 - abp) / (1.0 - ab) * (1.0 - ab / abp);
        assert!(((b.data()[0] - a.data()[0]) as f64 - var.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn noise_streams_are_distinct_and_stable() {
        let n = NoiseSource::new(4);
        assert_eq!(n.gaussian(3, &[4]), n.gaussian(3, &[4]));
        assert_ne!(n.gaussian(3, &[4]), n.gaussian(4, &[4]));
    }
}
