//! Channel balancing ahead of activation quantization.
//!
//! For a linear map `y = x·W` with `x: [rows × K]`, `W: [K × N]`:
//!
//! 1. per-input-channel scales `c` migrate activation outliers into the
//!    weights: `(x ⊘ c)·(diag(c)·W) = x·W`;
//! 2. a block Walsh–Hadamard rotation `R` spreads what is left evenly across
//!    channels: `(x·R)·(Rᵀ·W) = x·W`.
//!
//! Both factors are folded into the weights offline; at run time only
//! `(x ⊘ c)·R` is applied to activations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SCALE_MIN: f32 = 1e-3;
const SCALE_MAX: f32 = 1e3;

/// Orthogonal block-diagonal rotation built from normalised Hadamard blocks
/// with a random ±1 sign flip per channel. Channels past the last full block
/// are left untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RotationSpec", into = "RotationSpec")]
pub struct HadamardRotation {
    channels: usize,
    block: usize,
    /// `None` means all signs are `+1`.
    sign_seed: Option<u64>,
    signs: Vec<f32>,
}

/// Serialized form: the signs are regenerated from the seed.
#[derive(Serialize, Deserialize)]
struct RotationSpec {
    channels: usize,
    block: usize,
    sign_seed: Option<u64>,
}

impl TryFrom<RotationSpec> for HadamardRotation {
    type Error = Error;

    fn try_from(s: RotationSpec) -> Result<Self> {
        HadamardRotation::new(s.channels, s.block, s.sign_seed)
    }
}

impl From<HadamardRotation> for RotationSpec {
    fn from(r: HadamardRotation) -> Self {
        RotationSpec {
            channels: r.channels,
            block: r.block,
            sign_seed: r.sign_seed,
        }
    }
}

impl HadamardRotation {
    pub fn new(channels: usize, block: usize, sign_seed: Option<u64>) -> Result<Self> {
        if !block.is_power_of_two() || block < 1 {
            return Err(Error::config(
                "rotation_block",
                format!("{block} is not a power of two"),
            ));
        }
        if channels == 0 {
            return Err(Error::Input("rotation over zero channels".into()));
        }
        let mut r = Self {
            channels,
            block,
            sign_seed,
            signs: Vec::new(),
        };
        r.fill_signs();
        Ok(r)
    }

    fn fill_signs(&mut self) {
        self.signs = match self.sign_seed {
            None => vec![1.0; self.channels],
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..self.channels)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect()
            }
        };
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn block(&self) -> usize {
        self.block
    }

    fn rotated_span(&self) -> usize {
        if self.block > self.channels {
            0
        } else {
            self.channels - self.channels % self.block
        }
    }

    /// Applies `v ↦ v·R` to one length-`channels` vector in place.
    pub fn rotate_vector(&self, v: &mut [f32]) {
        debug_assert_eq!(v.len(), self.channels);
        let span = self.rotated_span();
        let norm = 1.0 / (self.block as f64).sqrt();
        let mut buf = vec![0.0f64; self.block];
        for start in (0..span).step_by(self.block) {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = (v[start + i] * self.signs[start + i]) as f64;
            }
            fwht(&mut buf);
            for (i, b) in buf.iter().enumerate() {
                v[start + i] = (b * norm) as f32;
            }
        }
    }

    /// `x·R` for every row of `x`.
    pub fn rotate_rows(&self, x: &Tensor) -> Result<Tensor> {
        if x.last_dim() != self.channels {
            return Err(Error::Dimension(format!(
                "rotation over {} channels applied to rows of length {}",
                self.channels,
                x.last_dim()
            )));
        }
        let mut out = x.clone();
        let n = self.channels;
        for row in out.data_mut().chunks_mut(n) {
            self.rotate_vector(row);
        }
        Ok(out)
    }

    /// `Rᵀ·W` for `W: [channels × N]`.
    ///
    /// Each Hadamard block is symmetric, so `Rᵀ·w` for a column `w` is the
    /// same map as the row rotation.
    pub fn rotate_weight(&self, w: &Tensor) -> Result<Tensor> {
        let t = w.transpose()?;
        self.rotate_rows(&t)?.transpose()
    }

    /// Dense `R`, for verification.
    pub fn to_matrix(&self) -> Tensor {
        let n = self.channels;
        let mut m = Tensor::identity(n);
        for row in m.data_mut().chunks_mut(n) {
            self.rotate_vector(row);
        }
        m
    }
}

/// Unnormalised in-place fast Walsh–Hadamard transform (natural order).
fn fwht(v: &mut [f64]) {
    let n = v.len();
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(2 * h) {
            for j in i..i + h {
                let (a, b) = (v[j], v[j + h]);
                v[j] = a + b;
                v[j + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Per-channel scaling followed by a Hadamard rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceTransform {
    pub channel_scales: Vec<f32>,
    pub rotation: HadamardRotation,
}

impl BalanceTransform {
    /// Run-time activation side: `(x ⊘ c)·R`.
    pub fn apply_activation(&self, x: &Tensor) -> Result<Tensor> {
        if x.last_dim() != self.channel_scales.len() {
            return Err(Error::Dimension(format!(
                "balance over {} channels applied to rows of length {}",
                self.channel_scales.len(),
                x.last_dim()
            )));
        }
        let mut scaled = x.clone();
        let n = self.channel_scales.len();
        for row in scaled.data_mut().chunks_mut(n) {
            for (v, c) in row.iter_mut().zip(&self.channel_scales) {
                *v /= c;
            }
        }
        self.rotation.rotate_rows(&scaled)
    }
}

/// Scale rule `c_j = sqrt(max|x_j| / max|w_j|)` clipped to `[1e-3, 1e3]`;
/// a zero on either side leaves the channel at 1.
pub fn channel_scales(w: &Tensor, activation_max_abs: &[f32]) -> Result<Vec<f32>> {
    let (k, n) = w.dims2()?;
    if activation_max_abs.len() != k {
        return Err(Error::Dimension(format!(
            "{} activation statistics for {k} input channels",
            activation_max_abs.len()
        )));
    }
    Ok((0..k)
        .map(|j| {
            let wmax = w.data()[j * n..(j + 1) * n]
                .iter()
                .fold(0.0f32, |m, v| m.max(v.abs()));
            let amax = activation_max_abs[j];
            if wmax > 0.0 && amax > 0.0 && amax.is_finite() {
                (amax / wmax).sqrt().clamp(SCALE_MIN, SCALE_MAX)
            } else {
                1.0
            }
        })
        .collect())
}

/// Folds `diag(c)` and then `Rᵀ` into the weights.
///
/// Returns `Rᵀ·diag(c)·W` and the transform whose activation side undoes it.
pub fn balance_channels(
    w: &Tensor,
    activation_max_abs: &[f32],
    rotation_block: usize,
    sign_seed: Option<u64>,
) -> Result<(Tensor, BalanceTransform)> {
    let scales = channel_scales(w, activation_max_abs)?;
    let (k, n) = w.dims2()?;
    let mut scaled = w.clone();
    for (j, row) in scaled.data_mut().chunks_mut(n).enumerate() {
        for v in row.iter_mut() {
            *v *= scales[j];
        }
    }
    let rotation = HadamardRotation::new(k, rotation_block.min(k.next_power_of_two()), sign_seed)?;
    let balanced = rotation.rotate_weight(&scaled)?;
    Ok((
        balanced,
        BalanceTransform {
            channel_scales: scales,
            rotation,
        },
    ))
}
