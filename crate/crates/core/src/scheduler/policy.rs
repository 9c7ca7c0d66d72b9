//! Piecewise decision rules. Every function here is pure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ThresholdConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `D = ‖p_now − p_cached‖₁ / k · ‖m_now − m_prev‖₂`.
///
/// The second factor is the one-step change of the layer's feature map
/// between consecutive timesteps.
pub fn divergence_score(
    p_now: &Tensor,
    p_cached: &Tensor,
    k: usize,
    m_now: &Tensor,
    m_prev: &Tensor,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Input("divergence needs a cache age k ≥ 1".into()));
    }
    let drift = p_now.sub(p_cached)?.l1_norm() / k as f64;
    let grad = m_now.sub(m_prev)?.l2_norm();
    Ok(drift * grad)
}

/// Refresh interval for a fresh divergence score.
pub fn refresh_interval(d: f64, cfg: &ThresholdConfig) -> usize {
    if d < cfg.delta1 {
        cfg.tau_max
    } else if d < cfg.delta2 {
        cfg.tau_mid
    } else {
        cfg.tau_min
    }
}

/// `R = 1 / (1 + mean D)`; 1 means nothing changed.
pub fn redundancy_metric(divergences: &[f64]) -> Result<f64> {
    if divergences.is_empty() {
        return Err(Error::Input("redundancy over zero layers".into()));
    }
    if let Some(d) = divergences.iter().find(|d| d.is_nan() || **d < 0.0) {
        return Err(Error::Input(format!("divergence {d} is negative or NaN")));
    }
    let mean = divergences.iter().sum::<f64>() / divergences.len() as f64;
    Ok(1.0 / (1.0 + mean))
}

/// High redundancy tolerates the fewest bits.
pub fn activation_bits(r: f64, cfg: &ThresholdConfig) -> u8 {
    if r >= cfg.theta2 {
        cfg.bit_min
    } else if r >= cfg.theta1 {
        cfg.bit_mid
    } else {
        cfg.bit_max
    }
}

/// Cosine similarity of two flattened tensors; 0 if either is all zeros.
pub fn layer_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "similarity of shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn prune_probability(s: f64, cfg: &ThresholdConfig) -> f64 {
    if s > cfg.tau_high {
        1.0
    } else if s >= cfg.tau_low {
        cfg.p_base
    } else {
        0.0
    }
}

/// `V = Σ_i ‖p_t − p_{t−i}‖₁` over whatever history is available.
pub fn cumulative_variation(history: &[Tensor], current: &Tensor) -> Result<f64> {
    history.iter().map(|h| Ok(current.sub(h)?.l1_norm())).sum()
}

/// Pruning base rate after accounting for how much the features have been moving.
pub fn adapt_prune_rate(v: f64, cfg: &ThresholdConfig) -> f64 {
    if v < cfg.delta_low {
        (cfg.p_base * cfg.prune_adjust).min(1.0)
    } else if v > cfg.delta_high {
        cfg.p_base / cfg.prune_adjust
    } else {
        cfg.p_base
    }
}

/// Uniform draw in `[0, 1)` keyed by `(seed, t, layer)`; independent of call order.
pub fn prune_draw(seed: u64, t: usize, layer: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((t as u64) << 32) | layer as u64);
    rng.random::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f32]) -> Tensor {
        Tensor::new(vec![values.len()], values.to_vec()).unwrap()
    }

    fn cfg() -> ThresholdConfig {
        ThresholdConfig {
            delta1: 0.1,
            delta2: 0.3,
            tau_low: 0.3,
            p_base: 0.5,
            ..ThresholdConfig::default()
        }
    }

    #[test]
    fn divergence_examples() {
        let a = v(&[1.0, 2.0]);
        let m = v(&[0.0, 0.0]);
        assert_eq!(
            divergence_score(&a, &a, 1, &v(&[1.0, 0.0]), &m).unwrap(),
            0.0
        );
        assert_eq!(divergence_score(&a, &m, 1, &m, &m).unwrap(), 0.0);
        // L1 of the drift is 6, k = 2, gradient has L2 norm 0.5
        let d = divergence_score(&v(&[3.0, 3.0]), &v(&[0.0, 0.0]), 2, &v(&[0.3, 0.4]), &m).unwrap();
        assert!((d - 1.5).abs() < 1e-7);
        assert!(divergence_score(&a, &a, 0, &m, &m).is_err());
        assert!(divergence_score(&a, &v(&[1.0]), 1, &m, &m).is_err());
    }

    #[test]
    fn refresh_examples() {
        let c = cfg();
        assert_eq!(refresh_interval(0.05, &c), c.tau_max);
        assert_eq!(refresh_interval(0.1, &c), c.tau_mid);
        assert_eq!(refresh_interval(0.9, &c), c.tau_min);
        assert_eq!(refresh_interval(0.3, &c), c.tau_min);
    }

    #[test]
    fn redundancy_examples() {
        assert_eq!(redundancy_metric(&[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(redundancy_metric(&[0.5, 1.5]).unwrap(), 0.5);
        assert!(redundancy_metric(&[1e300]).unwrap() < 1e-299);
        assert!(redundancy_metric(&[]).is_err());
    }

    #[test]
    fn bit_examples() {
        let c = cfg();
        assert_eq!(activation_bits(0.95, &c), c.bit_min);
        assert_eq!(activation_bits(0.1, &c), c.bit_max);
        assert_eq!(activation_bits(c.theta1, &c), c.bit_mid);
        assert_eq!(activation_bits(c.theta2, &c), c.bit_min);
    }

    #[test]
    fn similarity_examples() {
        let a = v(&[1.0, 0.0]);
        assert!((layer_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(layer_similarity(&a, &v(&[0.0, 3.0])).unwrap(), 0.0);
        let s = layer_similarity(&a, &v(&[1.0, 1.0])).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(layer_similarity(&a, &v(&[0.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn prune_examples() {
        let c = cfg();
        assert_eq!(prune_probability(0.99, &c), 1.0);
        assert_eq!(prune_probability(0.5, &c), 0.5);
        assert_eq!(prune_probability(0.1, &c), 0.0);
        assert_eq!(prune_probability(c.tau_high, &c), c.p_base);
        assert_eq!(prune_probability(c.tau_low, &c), c.p_base);
    }

    #[test]
    fn variation_examples() {
        let p = v(&[1.0, 1.0]);
        assert_eq!(
            cumulative_variation(&[p.clone(), p.clone()], &p).unwrap(),
            0.0
        );
        assert_eq!(cumulative_variation(&[], &p).unwrap(), 0.0);
        let h = [v(&[0.0, 0.0]), v(&[1.0, 0.0])];
        assert_eq!(cumulative_variation(&h, &p).unwrap(), 3.0);
    }

    #[test]
    fn adapt_examples() {
        let c = ThresholdConfig {
            p_base: 0.5,
            prune_adjust: 2.0,
            delta_low: 1.0,
            delta_high: 2.0,
            ..ThresholdConfig::default()
        };
        assert_eq!(adapt_prune_rate(0.5, &c), 1.0);
        assert_eq!(adapt_prune_rate(3.0, &c), 0.25);
        assert_eq!(adapt_prune_rate(1.5, &c), 0.5);
        assert_eq!(adapt_prune_rate(1.0, &c), 0.5);
        assert_eq!(adapt_prune_rate(2.0, &c), 0.5);
    }

    #[test]
    fn draws_are_keyed_and_uniform() {
        assert_eq!(prune_draw(7, 10, 3), prune_draw(7, 10, 3));
        assert_ne!(prune_draw(7, 10, 3), prune_draw(7, 10, 4));
        assert_ne!(prune_draw(7, 10, 3), prune_draw(8, 10, 3));
        let mean: f64 = (0..2000).map(|i| prune_draw(1, i / 8, i % 8)).sum::<f64>() / 2000.0;
        assert!((mean - 0.5).abs() < 0.03, "{mean}");
    }
}
