use serde::{Deserialize, Serialize};

use super::allocate::WeightBitPlan;
use super::balance::{balance_channels, BalanceTransform};
use super::params::{
    compute_minmax_params_with_zero, dequantize, quantize, Granularity, QuantizedTensor,
};
use crate::error::{Error, Result};
use crate::model::{DiT, LayerHooks, LinearKind, LinearSite};
use crate::tensor::{matmul_fp, matmul_int, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantOptions {
    /// Quantize weights per output channel at the plan's bit-widths.
    pub weights: bool,
    /// Balance and quantize activations per tensor at the step's bit-width.
    pub activations: bool,
    pub rotation_block: usize,
    /// Seed for the rotation sign patterns; each site derives its own.
    pub sign_seed: u64,
}

impl Default for QuantOptions {
    fn default() -> Self {
        Self {
            weights: true,
            activations: true,
            rotation_block: 32,
            sign_seed: 0,
        }
    }
}

/// Per-channel max-abs of every projection's input, indexed
/// `[layer][LinearKind::index()][channel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub max_abs: Vec<Vec<Vec<f32>>>,
}

impl ActivationStats {
    pub fn empty(layers: usize) -> Self {
        Self {
            max_abs: vec![vec![Vec::new(); LinearKind::ALL.len()]; layers],
        }
    }

    pub fn site(&self, site: LinearSite) -> &[f32] {
        &self.max_abs[site.layer][site.kind.index()]
    }

    /// Folds one projection input into the running maxima.
    pub fn observe(&mut self, site: LinearSite, x: &Tensor) {
        let slot = &mut self.max_abs[site.layer][site.kind.index()];
        let n = x.last_dim();
        if slot.is_empty() {
            slot.resize(n, 0.0);
        }
        for row in x.data().chunks(n) {
            for (m, v) in slot.iter_mut().zip(row) {
                *m = m.max(v.abs());
            }
        }
    }
}

/// Full-precision hooks that record activation ranges on the way through.
#[derive(Debug, Clone)]
pub struct ActivationRecorder {
    pub stats: ActivationStats,
}

impl ActivationRecorder {
    pub fn new(layers: usize) -> Self {
        Self {
            stats: ActivationStats::empty(layers),
        }
    }
}

impl LayerHooks for ActivationRecorder {
    fn linear(&mut self, site: LinearSite, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        self.stats.observe(site, x);
        matmul_fp(x, w)
    }
}

#[derive(Debug, Clone)]
struct SiteState {
    balance: Option<BalanceTransform>,
    /// Weight used on the floating-point path: original, balanced, and/or
    /// dequantized depending on the options.
    weight: Tensor,
    codes: Option<QuantizedTensor>,
}

/// Precision used by one projection call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearPrecision {
    Float,
    /// Both operands integer: `(activation bits, weight bits)`.
    Integer(u8, u8),
}

/// Prepared weights for every projection of a model.
///
/// Balancing and weight quantization happen once here; at run time only the
/// activation transform and its per-tensor quantization are computed.
#[derive(Debug, Clone)]
pub struct QuantEngine {
    options: QuantOptions,
    plan: Option<WeightBitPlan>,
    sites: Vec<Vec<SiteState>>,
}

impl QuantEngine {
    pub fn new(
        model: &DiT,
        plan: Option<&WeightBitPlan>,
        stats: Option<&ActivationStats>,
        options: QuantOptions,
    ) -> Result<Self> {
        let layers = model.num_blocks();
        if options.weights {
            let plan = plan.ok_or_else(|| {
                Error::config("weight_bits", "weight quantization needs a bit plan")
            })?;
            plan.validate(layers)?;
        }
        if options.activations && stats.is_none() {
            return Err(Error::config(
                "calibration",
                "activation quantization needs calibration statistics",
            ));
        }
        let mut sites = Vec::with_capacity(layers);
        for layer in 0..layers {
            let mut row = Vec::with_capacity(LinearKind::ALL.len());
            for kind in LinearKind::ALL {
                let site = LinearSite { layer, kind };
                let w = model.block(layer).linear(kind);
                let (weight, balance) = match stats {
                    Some(s) if options.activations => {
                        let amax = s.site(site);
                        if amax.len() != w.rows() {
                            return Err(Error::Dimension(format!(
                                "calibration for layer {layer} {} has {} channels, weight has {}",
                                kind.name(),
                                amax.len(),
                                w.rows()
                            )));
                        }
                        let seed = options
                            .sign_seed
                            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                            .wrapping_add((layer * LinearKind::ALL.len() + kind.index()) as u64);
                        let (wb, t) =
                            balance_channels(w, amax, options.rotation_block, Some(seed))?;
                        (wb, Some(t))
                    }
                    _ => (w.clone(), None),
                };
                let (weight, codes) = match plan {
                    Some(p) if options.weights => {
                        let params = compute_minmax_params_with_zero(
                            &weight,
                            p.bits(layer),
                            Granularity::PerChannel { axis: 1 },
                        )?;
                        let q = quantize(&weight, &params)?;
                        (dequantize(&q), Some(q))
                    }
                    _ => (weight, None),
                };
                row.push(SiteState {
                    balance,
                    weight,
                    codes,
                });
            }
            sites.push(row);
        }
        Ok(Self {
            options,
            plan: plan.cloned().filter(|_| options.weights),
            sites,
        })
    }

    pub fn options(&self) -> &QuantOptions {
        &self.options
    }

    pub fn weight_bits(&self, layer: usize) -> Option<u8> {
        self.plan.as_ref().map(|p| p.bits(layer))
    }

    /// The weight the floating-point path multiplies by.
    pub fn effective_weight(&self, site: LinearSite) -> &Tensor {
        &self.sites[site.layer][site.kind.index()].weight
    }

    /// `x·W` for one site. `activation_bits = None` keeps activations in full
    /// precision (the balancing transform still applies if enabled).
    pub fn linear(
        &self,
        site: LinearSite,
        x: &Tensor,
        activation_bits: Option<u8>,
    ) -> Result<(Tensor, LinearPrecision)> {
        let state = self
            .sites
            .get(site.layer)
            .and_then(|r| r.get(site.kind.index()))
            .ok_or_else(|| Error::Input(format!("no quantized site for layer {}", site.layer)))?;
        let xb = match &state.balance {
            Some(t) => t.apply_activation(x)?,
            None => x.clone(),
        };
        let bits = activation_bits.filter(|_| self.options.activations);
        match (bits, &state.codes) {
            (Some(b), Some(wq)) => {
                let aq = quantize(
                    &xb,
                    &compute_minmax_params_with_zero(&xb, b, Granularity::PerTensor)?,
                )?;
                let y = matmul_int(&aq, wq)?;
                Ok((y, LinearPrecision::Integer(b, wq.params().bits())))
            }
            (Some(b), None) => {
                let xq = dequantize(&quantize(
                    &xb,
                    &compute_minmax_params_with_zero(&xb, b, Granularity::PerTensor)?,
                )?);
                Ok((matmul_fp(&xq, &state.weight)?, LinearPrecision::Float))
            }
            (None, _) => Ok((matmul_fp(&xb, &state.weight)?, LinearPrecision::Float)),
        }
    }

    /// Hooks that route every projection through this engine at a fixed
    /// activation bit-width.
    pub fn hooks(&self, activation_bits: Option<u8>) -> QuantHooks<'_> {
        QuantHooks {
            engine: self,
            activation_bits,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuantHooks<'a> {
    engine: &'a QuantEngine,
    activation_bits: Option<u8>,
}

impl LayerHooks for QuantHooks<'_> {
    fn linear(&mut self, site: LinearSite, x: &Tensor, _w: &Tensor) -> Result<Tensor> {
        self.engine
            .linear(site, x, self.activation_bits)
            .map(|(y, _)| y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, DiTConfig, NoHooks};

    fn cfg() -> DiTConfig {
        DiTConfig {
            num_blocks: 2,
            model_dim: 8,
            num_heads: 2,
            tokens_per_frame: 4,
            frames: 2,
            cond_dim: 4,
            cond_tokens: 2,
            timesteps: 10,
            seed: 3,
        }
    }

    fn inputs(c: &DiTConfig) -> (Tensor, Tensor) {
        let n: usize = c.latent_shape().iter().product();
        let x = Tensor::new(
            c.latent_shape(),
            (0..n).map(|i| ((i * 13 % 17) as f32 - 8.0) / 4.0).collect(),
        )
        .unwrap();
        let m = c.cond_tokens * c.cond_dim;
        let cond = Tensor::new(c.cond_shape(), (0..m).map(|i| (i as f32).cos()).collect()).unwrap();
        (x, cond)
    }

    fn stats(model: &DiT, x: &Tensor, cond: &Tensor) -> ActivationStats {
        let mut rec = ActivationRecorder::new(model.num_blocks());
        model.predict_noise(x, 5, cond, &mut rec).unwrap();
        rec.stats
    }

    #[test]
    fn disabled_engine_is_transparent() {
        let c = cfg();
        let m = init_model(&c).unwrap();
        let (x, cond) = inputs(&c);
        let opts = QuantOptions {
            weights: false,
            activations: false,
            ..Default::default()
        };
        let e = QuantEngine::new(&m, None, None, opts).unwrap();
        let a = m
            .predict_noise(&x, 5, &cond, &mut e.hooks(Some(4)))
            .unwrap();
        let b = m.predict_noise(&x, 5, &cond, &mut NoHooks).unwrap();
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
    }

    #[test]
    fn recorder_is_transparent() {
        let c = cfg();
        let m = init_model(&c).unwrap();
        let (x, cond) = inputs(&c);
        let mut rec = ActivationRecorder::new(2);
        let a = m.predict_noise(&x, 5, &cond, &mut rec).unwrap();
        let b = m.predict_noise(&x, 5, &cond, &mut NoHooks).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            rec.stats
                .site(LinearSite {
                    layer: 1,
                    kind: LinearKind::FfnDown
                })
                .len(),
            32
        );
        assert_eq!(
            rec.stats
                .site(LinearSite {
                    layer: 0,
                    kind: LinearKind::CrossKv
                })
                .len(),
            4
        );
    }

    #[test]
    fn balancing_alone_preserves_the_model() {
        let c = cfg();
        let m = init_model(&c).unwrap();
        let (x, cond) = inputs(&c);
        let s = stats(&m, &x, &cond);
        let opts = QuantOptions {
            weights: false,
            activations: true,
            rotation_block: 4,
            sign_seed: 1,
        };
        let e = QuantEngine::new(&m, None, Some(&s), opts).unwrap();
        let a = m.predict_noise(&x, 5, &cond, &mut e.hooks(None)).unwrap();
        let b = m.predict_noise(&x, 5, &cond, &mut NoHooks).unwrap();
        let rel = a.sub(&b).unwrap().l2_norm() / b.l2_norm();
        assert!(rel < 1e-4, "{rel}");
    }

    #[test]
    fn integer_path_matches_fake_quantized_float_path() {
        let c = cfg();
        let m = init_model(&c).unwrap();
        let (x, cond) = inputs(&c);
        let s = stats(&m, &x, &cond);
        let plan = WeightBitPlan::uniform(2, 6);
        let e = QuantEngine::new(&m, Some(&plan), Some(&s), QuantOptions::default()).unwrap();
        let site = LinearSite {
            layer: 1,
            kind: LinearKind::FfnUp,
        };
        let h = Tensor::new(
            vec![3, 8],
            (0..24).map(|i| (i as f32 * 0.37).sin() * 2.0).collect(),
        )
        .unwrap();
        let (y, p) = e.linear(site, &h, Some(8)).unwrap();
        assert_eq!(p, LinearPrecision::Integer(8, 6));
        let xb = e.sites[1][site.kind.index()]
            .balance
            .as_ref()
            .unwrap()
            .apply_activation(&h)
            .unwrap();
        let xq = dequantize(
            &quantize(
                &xb,
                &compute_minmax_params_with_zero(&xb, 8, Granularity::PerTensor).unwrap(),
            )
            .unwrap(),
        );
        let reference = matmul_fp(&xq, e.effective_weight(site)).unwrap();
        assert_eq!(y.max_abs_diff(&reference).unwrap(), 0.0);
    }

    #[test]
    fn eight_bit_weights_stay_within_half_step_bound() {
        let c = cfg();
        let m = init_model(&c).unwrap();
        let opts = QuantOptions {
            weights: true,
            activations: false,
            ..Default::default()
        };
        let e = QuantEngine::new(&m, Some(&WeightBitPlan::uniform(2, 8)), None, opts).unwrap();
        let site = LinearSite {
            layer: 0,
            kind: LinearKind::SelfOut,
        };
        let w = m.block(0).linear(site.kind);
        let x = Tensor::new(vec![2, 8], (0..16).map(|i| i as f32 * 0.25 - 2.0).collect()).unwrap();
        let (y, _) = e.linear(site, &x, None).unwrap();
        let exact = matmul_fp(&x, w).unwrap();
        let params =
            compute_minmax_params_with_zero(w, 8, Granularity::PerChannel { axis: 1 }).unwrap();
        for i in 0..2 {
            let l1: f64 = x.row(i).iter().map(|v| v.abs() as f64).sum();
            for j in 0..8 {
                let bound = l1 * params.scale(j) as f64 / 2.0 + 1e-6;
                let dev = (y.data()[i * 8 + j] - exact.data()[i * 8 + j]).abs() as f64;
                assert!(dev <= bound, "{dev} > {bound}");
            }
        }
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let m = init_model(&cfg()).unwrap();
        assert!(matches!(
            QuantEngine::new(&m, None, None, QuantOptions::default()),
            Err(Error::Config { .. })
        ));
    }
}
