use serde::{Deserialize, Serialize};

use super::params::{compute_minmax_params_with_zero, fake_quantize, Granularity};
use crate::error::{Error, Result};
use crate::model::{DiT, LayerHooks, LinearKind, LinearSite, NoHooks};
use crate::tensor::{matmul_fp, Tensor};

/// One model input drawn from a full-precision trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub x_t: Tensor,
    pub t: usize,
    pub cond: Tensor,
}

/// Swaps in fake-quantized weights for a single layer.
struct SingleLayerWeights {
    layer: usize,
    weights: Vec<Tensor>,
}

impl LayerHooks for SingleLayerWeights {
    fn linear(&mut self, site: LinearSite, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        if site.layer == self.layer {
            matmul_fp(x, &self.weights[site.kind.index()])
        } else {
            matmul_fp(x, w)
        }
    }
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.sub(b)?;
    Ok(diff
        .data()
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        / diff.len() as f64)
}

/// Mean squared change of the noise prediction over `samples` when only
/// `layer`'s projection weights are quantized per output channel at `bits`.
pub fn measure_sensitivity(
    model: &DiT,
    layer: usize,
    samples: &[CalibrationSample],
    bits: u8,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input(
            "sensitivity needs at least one calibration sample".into(),
        ));
    }
    if layer >= model.num_blocks() {
        return Err(Error::Input(format!("no block {layer}")));
    }
    let weights = LinearKind::ALL
        .iter()
        .map(|&k| {
            let w = model.block(layer).linear(k);
            fake_quantize(
                w,
                &compute_minmax_params_with_zero(w, bits, Granularity::PerChannel { axis: 1 })?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut hooks = SingleLayerWeights { layer, weights };
    let mut total = 0.0;
    for s in samples {
        let reference = model.predict_noise(&s.x_t, s.t, &s.cond, &mut NoHooks)?;
        let perturbed = model.predict_noise(&s.x_t, s.t, &s.cond, &mut hooks)?;
        total += mse(&reference, &perturbed)?;
    }
    Ok(total / samples.len() as f64)
}

/// [`measure_sensitivity`] for every layer at 4 bits, the allocator's floor.
pub fn measure_sensitivities(model: &DiT, samples: &[CalibrationSample]) -> Result<Vec<f64>> {
    (0..model.num_blocks())
        .map(|l| measure_sensitivity(model, l, samples, 4))
        .collect()
}
