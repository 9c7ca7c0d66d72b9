use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Significant bits kept in every scale produced by [`compute_minmax_params`].
///
/// With 11-bit scale mantissas and 8-bit codes, `s·(q−z)` is exact in `f32`,
/// and every partial dot product of two such operands with `K·255² ≤ 2³¹` is
/// exact in `f64`. That is what makes the integer GEMM and the
/// dequantize-then-multiply path agree bit for bit.
pub const SCALE_MANTISSA_BITS: u32 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

/// Affine quantization parameters: `code = clamp(round(x/s) + z, 0, 2^b − 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    scales: Vec<f32>,
    zero_points: Vec<i32>,
    bits: u8,
    granularity: Granularity,
}

impl QuantParams {
    pub fn new(
        scales: Vec<f32>,
        zero_points: Vec<i32>,
        bits: u8,
        granularity: Granularity,
    ) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::config(
                "bit_width",
                format!("{bits} is outside 1..=8"),
            ));
        }
        if scales.is_empty() || scales.len() != zero_points.len() {
            return Err(Error::Input(format!(
                "{} scales vs {} zero points",
                scales.len(),
                zero_points.len()
            )));
        }
        if matches!(granularity, Granularity::PerTensor) && scales.len() != 1 {
            return Err(Error::Input(
                "per-tensor params carry exactly one scale".into(),
            ));
        }
        let qmax = (1i32 << bits) - 1;
        for (&s, &z) in scales.iter().zip(&zero_points) {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Input(format!(
                    "scale {s} must be positive and finite"
                )));
            }
            if !(0..=qmax).contains(&z) {
                return Err(Error::Input(format!("zero point {z} outside [0, {qmax}]")));
            }
        }
        Ok(Self {
            scales,
            zero_points,
            bits,
            granularity,
        })
    }

    pub fn per_tensor(scale: f32, zero_point: i32, bits: u8) -> Result<Self> {
        Self::new(vec![scale], vec![zero_point], bits, Granularity::PerTensor)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn channels(&self) -> usize {
        self.scales.len()
    }

    pub fn scale(&self, channel: usize) -> f32 {
        self.scales[channel]
    }

    pub fn zero_point(&self, channel: usize) -> i32 {
        self.zero_points[channel]
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn qmax(&self) -> i32 {
        (1i32 << self.bits) - 1
    }

    /// Channel index of every flat element of a tensor with `shape`.
    fn channel_of(&self, shape: &[usize]) -> Result<Box<dyn Fn(usize) -> usize>> {
        match self.granularity {
            Granularity::PerTensor => Ok(Box::new(|_| 0)),
            Granularity::PerChannel { axis } => {
                let (stride, len) = channel_layout(shape, axis)?;
                if len != self.channels() {
                    return Err(Error::Dimension(format!(
                        "{} channel params for axis {axis} of length {len}",
                        self.channels()
                    )));
                }
                Ok(Box::new(move |i| (i / stride) % len))
            }
        }
    }
}

fn channel_layout(shape: &[usize], axis: usize) -> Result<(usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "channel axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok((shape[axis + 1..].iter().product(), shape[axis]))
}

/// Integer codes plus the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<u8>,
    params: QuantParams,
    shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn from_codes(shape: Vec<usize>, codes: Vec<u8>, params: QuantParams) -> Result<Self> {
        if shape.iter().product::<usize>() != codes.len() {
            return Err(Error::Dimension(format!(
                "{} codes for shape {shape:?}",
                codes.len()
            )));
        }
        let qmax = params.qmax();
        if let Some(c) = codes.iter().find(|&&c| c as i32 > qmax) {
            return Err(Error::Input(format!("code {c} exceeds {qmax}")));
        }
        let _ = params.channel_of(&shape)?;
        Ok(Self {
            codes,
            params,
            shape,
        })
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
}

/// Rounds a positive scale up to [`SCALE_MANTISSA_BITS`] significant bits.
fn snap_scale(s: f32) -> f32 {
    let drop = 24 - SCALE_MANTISSA_BITS;
    let bits = s.to_bits();
    let mask = (1u32 << drop) - 1;
    if bits & mask == 0 {
        s
    } else {
        f32::from_bits((bits & !mask) + (1 << drop))
    }
}

fn minmax_pair(min: f32, max: f32, bits: u8) -> (f32, i32) {
    let qmax = ((1u32 << bits) - 1) as f32;
    let range = max - min;
    let s = if range > 0.0 && (range / qmax).is_normal() {
        snap_scale(range / qmax)
    } else {
        // max == min: unit scale, zero point from the same formula
        1.0
    };
    let z = (-min / s).round().clamp(0.0, qmax) as i32;
    (s, z)
}

/// Min-max parameters: `s = (max − min)/(2^b − 1)`, `z = clamp(round(−min/s), 0, 2^b − 1)`.
///
/// Scales are rounded up to [`SCALE_MANTISSA_BITS`] significant bits. A
/// constant input gets `s = 1`.
pub fn compute_minmax_params(
    x: &Tensor,
    bits: u8,
    granularity: Granularity,
) -> Result<QuantParams> {
    minmax_params(x, bits, granularity, false)
}

/// [`compute_minmax_params`] over each range widened to contain zero.
///
/// Without the widening, a range that lies entirely above zero gets `z = 0`
/// and its upper part clamps at `2^b − 1`; one entirely below zero clamps the
/// other way. Model weights and activations are quantized with this variant.
pub fn compute_minmax_params_with_zero(
    x: &Tensor,
    bits: u8,
    granularity: Granularity,
) -> Result<QuantParams> {
    minmax_params(x, bits, granularity, true)
}

fn minmax_params(
    x: &Tensor,
    bits: u8,
    granularity: Granularity,
    include_zero: bool,
) -> Result<QuantParams> {
    let widen = |lo: f32, hi: f32| {
        if include_zero {
            (lo.min(0.0), hi.max(0.0))
        } else {
            (lo, hi)
        }
    };
    if x.is_empty() {
        return Err(Error::Input("cannot calibrate an empty tensor".into()));
    }
    if !(1..=8).contains(&bits) {
        return Err(Error::config(
            "bit_width",
            format!("{bits} is outside 1..=8"),
        ));
    }
    match granularity {
        Granularity::PerTensor => {
            let (min, max) = x
                .data()
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            let (min, max) = widen(min, max);
            let (s, z) = minmax_pair(min, max, bits);
            QuantParams::per_tensor(s, z, bits)
        }
        Granularity::PerChannel { axis } => {
            let (stride, len) = channel_layout(x.shape(), axis)?;
            let mut lo = vec![f32::INFINITY; len];
            let mut hi = vec![f32::NEG_INFINITY; len];
            for (i, &v) in x.data().iter().enumerate() {
                let c = (i / stride) % len;
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
            let (scales, zps) = lo
                .iter()
                .zip(&hi)
                .map(|(&l, &h)| {
                    let (l, h) = widen(l, h);
                    minmax_pair(l, h, bits)
                })
                .unzip();
            QuantParams::new(scales, zps, bits, granularity)
        }
    }
}

/// `code = clamp(round(x/s) + z, 0, 2^b − 1)` with half-away-from-zero rounding.
pub fn quantize(x: &Tensor, p: &QuantParams) -> Result<QuantizedTensor> {
    let channel = p.channel_of(x.shape())?;
    let qmax = p.qmax() as f32;
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = channel(i);
            ((v / p.scales[c]).round() + p.zero_points[c] as f32).clamp(0.0, qmax) as u8
        })
        .collect();
    Ok(QuantizedTensor {
        codes,
        params: p.clone(),
        shape: x.shape().to_vec(),
    })
}

/// `x̂ = s·(code − z)`.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let channel = q
        .params
        .channel_of(&q.shape)
        .expect("validated at construction");
    let data = q
        .codes
        .iter()
        .enumerate()
        .map(|(i, &code)| {
            let c = channel(i);
            q.params.scales[c] * (code as i32 - q.params.zero_points[c]) as f32
        })
        .collect();
    Tensor::from_parts(q.shape.clone(), data)
}

/// Quantize then dequantize in one call.
pub fn fake_quantize(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    Ok(dequantize(&quantize(x, p)?))
}
