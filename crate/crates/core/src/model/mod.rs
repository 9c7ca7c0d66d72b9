//! A small seeded diffusion transformer over video latents.
//!
//! Latents are `[frames × tokens × d]`; every block attends over the full
//! flattened `frames·tokens` sequence, cross-attends to a fixed set of
//! conditioning tokens and runs a GELU FFN. A linear head maps the final
//! hidden state to the noise prediction.

mod block;
mod hooks;
mod snapshot;

pub use block::{block_forward, BlockWeights, LayerNormWeights};
pub use hooks::{BlockOverride, LayerHooks, LinearKind, LinearSite, MacCounter, NoHooks};
pub use snapshot::{load_snapshot, read_snapshot, save_snapshot, write_snapshot};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{matmul_fp, Tensor};

/// Standard deviation of the modulation tables and their timestep response.
const MODULATION_STD: f32 = 0.2;
/// Standard deviation of the layernorm affine perturbations around (1, 0).
const NORM_STD: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiTConfig {
    pub num_blocks: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub tokens_per_frame: usize,
    pub frames: usize,
    pub cond_dim: usize,
    /// Number of conditioning tokens the cross-attention reads.
    pub cond_tokens: usize,
    /// Diffusion steps the timestep embedding is normalised against.
    pub timesteps: usize,
    pub seed: u64,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            num_blocks: 8,
            model_dim: 64,
            num_heads: 4,
            tokens_per_frame: 16,
            frames: 4,
            cond_dim: 32,
            cond_tokens: 4,
            timesteps: 50,
            seed: 0,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.num_blocks", self.num_blocks),
            ("model.model_dim", self.model_dim),
            ("model.num_heads", self.num_heads),
            ("model.tokens_per_frame", self.tokens_per_frame),
            ("model.frames", self.frames),
            ("model.cond_dim", self.cond_dim),
            ("model.cond_tokens", self.cond_tokens),
            ("model.timesteps", self.timesteps),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "model.num_heads",
                format!(
                    "model_dim {} is not divisible by {} heads",
                    self.model_dim, self.num_heads
                ),
            ));
        }
        Ok(())
    }

    /// Tokens in the flattened sequence.
    pub fn sequence_len(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    /// Shape of a latent: `[frames, tokens, d]`.
    pub fn latent_shape(&self) -> Vec<usize> {
        vec![self.frames, self.tokens_per_frame, self.model_dim]
    }

    pub fn cond_shape(&self) -> Vec<usize> {
        vec![self.cond_tokens, self.cond_dim]
    }

    /// Multiply-accumulates of one block, independent of inputs.
    pub fn block_macs(&self) -> u64 {
        let n = self.sequence_len() as u64;
        let d = self.model_dim as u64;
        let c = self.cond_tokens as u64;
        let cd = self.cond_dim as u64;
        let self_attn = 3 * n * d * d + 2 * n * n * d + n * d * d;
        let cross_attn = n * d * d + c * cd * 2 * d + 2 * n * c * d + n * d * d;
        let ffn = 8 * n * d * d;
        self_attn + cross_attn + ffn
    }

    pub fn head_macs(&self) -> u64 {
        (self.sequence_len() * self.model_dim * self.model_dim) as u64
    }

    /// One full forward pass.
    pub fn forward_macs(&self) -> u64 {
        self.num_blocks as u64 * self.block_macs() + self.head_macs()
    }
}

/// Model weights. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct DiT {
    config: DiTConfig,
    pub(crate) blocks: Vec<BlockWeights>,
    pub(crate) head: Tensor,
    pub(crate) head_bias: Tensor,
}

/// Seeded initialisation: projections are `N(0, 1/fan_in)`, layernorm affines
/// sit near `(1, 0)`, modulation tables are small random offsets.
pub fn init_model(cfg: &DiTConfig) -> Result<DiT> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = |shape: &[usize], mean: f32, std: f32| -> Tensor {
        let dist = Normal::new(mean, std).expect("positive std");
        let n = shape.iter().product();
        Tensor::from_parts(
            shape.to_vec(),
            (0..n).map(|_| dist.sample(&mut rng)).collect(),
        )
    };
    let proj = |normal: &mut dyn FnMut(&[usize], f32, f32) -> Tensor, fan_in: usize, out: usize| {
        normal(&[fan_in, out], 0.0, 1.0 / (fan_in as f32).sqrt())
    };
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for _ in 0..cfg.num_blocks {
        let ln = |normal: &mut dyn FnMut(&[usize], f32, f32) -> Tensor| LayerNormWeights {
            gamma: normal(&[d], 1.0, NORM_STD),
            beta: normal(&[d], 0.0, NORM_STD),
        };
        let norm_self = ln(&mut normal);
        let self_qkv = proj(&mut normal, d, 3 * d);
        let self_out = proj(&mut normal, d, d);
        let norm_cross = ln(&mut normal);
        let cross_q = proj(&mut normal, d, d);
        let cross_kv = proj(&mut normal, cfg.cond_dim, 2 * d);
        let cross_out = proj(&mut normal, d, d);
        let norm_ffn = ln(&mut normal);
        let ffn_up = proj(&mut normal, d, 4 * d);
        let ffn_down = proj(&mut normal, 4 * d, d);
        let modulation = normal(&[6, d], 0.0, MODULATION_STD);
        let modulation_time = normal(&[6, d], 0.0, MODULATION_STD);
        blocks.push(BlockWeights {
            norm_self,
            self_qkv,
            self_out,
            norm_cross,
            cross_q,
            cross_kv,
            cross_out,
            norm_ffn,
            ffn_up,
            ffn_down,
            modulation,
            modulation_time,
        });
    }
    let head = proj(&mut normal, d, d);
    let head_bias = normal(&[d], 0.0, NORM_STD);
    DiT::from_parts(cfg.clone(), blocks, head, head_bias)
}

impl DiT {
    /// Assembles a model from explicit weights, checking every shape.
    pub fn from_parts(
        config: DiTConfig,
        blocks: Vec<BlockWeights>,
        head: Tensor,
        head_bias: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        if blocks.len() != config.num_blocks {
            return Err(Error::Dimension(format!(
                "{} blocks for a {}-block config",
                blocks.len(),
                config.num_blocks
            )));
        }
        for (l, b) in blocks.iter().enumerate() {
            let expected: [&[usize]; 15] = [
                &[d],
                &[d],
                &[d, 3 * d],
                &[d, d],
                &[d],
                &[d],
                &[d, d],
                &[config.cond_dim, 2 * d],
                &[d, d],
                &[d],
                &[d],
                &[d, 4 * d],
                &[4 * d, d],
                &[6, d],
                &[6, d],
            ];
            for (i, (t, e)) in b.tensors().iter().zip(expected).enumerate() {
                if t.shape() != e {
                    return Err(Error::Dimension(format!(
                        "block {l} tensor {i} has shape {:?}, expected {e:?}",
                        t.shape()
                    )));
                }
                if !t.all_finite() {
                    return Err(Error::NonFinite(format!("block {l} tensor {i}")));
                }
            }
        }
        if head.shape() != [d, d] || head_bias.shape() != [d] {
            return Err(Error::Dimension(
                "head must be [d × d] with a [d] bias".into(),
            ));
        }
        Ok(Self {
            config,
            blocks,
            head,
            head_bias,
        })
    }

    pub fn config(&self) -> &DiTConfig {
        &self.config
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, layer: usize) -> &BlockWeights {
        &self.blocks[layer]
    }

    pub fn head(&self) -> (&Tensor, &Tensor) {
        (&self.head, &self.head_bias)
    }

    /// Copy with one block's weights replaced.
    pub fn with_block(&self, layer: usize, weights: BlockWeights) -> Result<DiT> {
        let mut blocks = self.blocks.clone();
        if layer >= blocks.len() {
            return Err(Error::Input(format!("no block {layer}")));
        }
        blocks[layer] = weights;
        DiT::from_parts(
            self.config.clone(),
            blocks,
            self.head.clone(),
            self.head_bias.clone(),
        )
    }

    /// Every tensor in serialization order: blocks first, then the head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.blocks.iter().flat_map(|b| b.tensors()).collect();
        out.push(&self.head);
        out.push(&self.head_bias);
        out
    }

    /// SHA-256 (hex) over the binary weight snapshot.
    pub fn weight_checksum(&self) -> String {
        let mut buf = Vec::new();
        write_snapshot(self, &mut buf).expect("writing to memory");
        hex::encode(Sha256::digest(&buf))
    }

    /// Sinusoidal embedding of `t`, length `d`: half sines, half cosines over
    /// geometrically spaced frequencies of the normalised timestep.
    pub fn time_embedding(&self, t: usize) -> Tensor {
        let d = self.config.model_dim;
        let half = d / 2;
        let phase = std::f64::consts::PI * t as f64 / self.config.timesteps as f64;
        let mut e = vec![0.0f32; d];
        for i in 0..half {
            let freq = if half > 1 {
                0.5 * 8f64.powf(i as f64 / (half - 1) as f64)
            } else {
                1.0
            };
            e[i] = (phase * freq).sin() as f32;
            e[half + i] = (phase * freq).cos() as f32;
        }
        Tensor::from_parts(vec![d], e)
    }

    /// Hidden state `[frames·tokens × d]` from a latent.
    fn flatten_latent(&self, x_t: &Tensor) -> Result<Tensor> {
        let shape = self.config.latent_shape();
        if x_t.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "latent shape {:?}, expected {shape:?}",
                x_t.shape()
            )));
        }
        if !x_t.all_finite() {
            return Err(Error::NonFinite("latent input".into()));
        }
        x_t.clone()
            .reshape(vec![self.config.sequence_len(), self.config.model_dim])
    }

    fn check_cond(&self, cond: &Tensor) -> Result<()> {
        if cond.shape() != self.config.cond_shape().as_slice() {
            return Err(Error::Dimension(format!(
                "conditioning shape {:?}, expected {:?}",
                cond.shape(),
                self.config.cond_shape()
            )));
        }
        Ok(())
    }

    /// Noise prediction for latent `x_t` at step `t`.
    ///
    /// Every block first goes through `hooks.before_block`, which may replace
    /// it outright; `after_block` always sees the block's input and output.
    /// The head runs in full precision.
    pub fn predict_noise(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: &Tensor,
        hooks: &mut dyn LayerHooks,
    ) -> Result<Tensor> {
        if t >= self.config.timesteps {
            return Err(Error::Input(format!(
                "timestep {t} outside [0, {})",
                self.config.timesteps
            )));
        }
        self.check_cond(cond)?;
        let mut h = self.flatten_latent(x_t)?;
        let temb = self.time_embedding(t);
        for (l, w) in self.blocks.iter().enumerate() {
            let out = match hooks.before_block(l, &h)? {
                BlockOverride::Run => {
                    let (out, macs) =
                        block_forward(&h, cond, &temb, w, self.config.num_heads, l, hooks)?;
                    hooks.record_macs(Some(l), macs);
                    out
                }
                BlockOverride::Replace(out) => {
                    if out.shape() != h.shape() {
                        return Err(Error::Dimension(format!(
                            "replacement for block {l} has shape {:?}, expected {:?}",
                            out.shape(),
                            h.shape()
                        )));
                    }
                    out
                }
            };
            hooks.after_block(l, &h, &out)?;
            h = out;
        }
        let mut y = matmul_fp(&h, &self.head)?;
        let d = self.config.model_dim;
        for row in y.data_mut().chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(self.head_bias.data()) {
                *v += b;
            }
        }
        hooks.record_macs(None, self.config.head_macs());
        let out = y.reshape(x_t.shape().to_vec())?;
        match x_t.frame_axis() {
            Some(a) => out.with_frame_axis(a),
            None => Ok(out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DiTConfig {
        DiTConfig {
            num_blocks: 2,
            model_dim: 8,
            num_heads: 2,
            tokens_per_frame: 3,
            frames: 2,
            cond_dim: 4,
            cond_tokens: 2,
            timesteps: 10,
            seed: 5,
        }
    }

    fn latent(cfg: &DiTConfig, scale: f32) -> Tensor {
        let shape = cfg.latent_shape();
        let n: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..n)
                .map(|i| ((i * 37 % 11) as f32 - 5.0) * scale)
                .collect(),
        )
        .unwrap()
    }

    fn cond(cfg: &DiTConfig) -> Tensor {
        let n = cfg.cond_tokens * cfg.cond_dim;
        Tensor::new(
            cfg.cond_shape(),
            (0..n).map(|i| (i as f32 * 0.7).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = init_model(&small()).unwrap();
        let b = init_model(&small()).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
        let c = init_model(&DiTConfig { seed: 6, ..small() }).unwrap();
        assert_ne!(a.weight_checksum(), c.weight_checksum());
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = DiTConfig {
            num_heads: 3,
            ..small()
        };
        assert!(matches!(init_model(&cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn mac_counter_matches_closed_form() {
        let cfg = small();
        let m = init_model(&cfg).unwrap();
        let mut counter = MacCounter::default();
        m.predict_noise(&latent(&cfg, 0.3), 4, &cond(&cfg), &mut counter)
            .unwrap();
        assert_eq!(counter.per_layer, vec![cfg.block_macs(); 2]);
        assert_eq!(counter.head, cfg.head_macs());
    }

    #[test]
    fn output_keeps_latent_shape() {
        let cfg = small();
        let m = init_model(&cfg).unwrap();
        let x = latent(&cfg, 0.3).with_frame_axis(0).unwrap();
        let y = m.predict_noise(&x, 0, &cond(&cfg), &mut NoHooks).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.frame_axis(), Some(0));
    }

    #[test]
    fn timestep_out_of_range() {
        let cfg = small();
        let m = init_model(&cfg).unwrap();
        assert!(matches!(
            m.predict_noise(&latent(&cfg, 1.0), 10, &cond(&cfg), &mut NoHooks),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn zero_blocks_reduce_to_head() {
        let cfg = small();
        let m = init_model(&cfg).unwrap();
        let zeroed = (0..cfg.num_blocks).fold(m.clone(), |acc, l| {
            let mut w = acc.block(l).clone();
            for t in w.tensors_mut() {
                *t = Tensor::zeros(t.shape());
            }
            acc.with_block(l, w).unwrap()
        });
        let x = latent(&cfg, 2.5);
        let y = zeroed
            .predict_noise(&x, 3, &cond(&cfg), &mut NoHooks)
            .unwrap();
        let d = cfg.model_dim;
        let (w, b) = zeroed.head();
        for (r, row) in x.data().chunks(d).enumerate() {
            for c in 0..d {
                let expect: f64 = (0..d)
                    .map(|k| row[k] as f64 * w.data()[k * d + c] as f64)
                    .sum::<f64>();
                let got = y.data()[r * d + c];
                assert!((got - (expect as f32 + b.data()[c])).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn time_embedding_varies_smoothly() {
        let m = init_model(&small()).unwrap();
        let a = m.time_embedding(4);
        let b = m.time_embedding(5);
        let far = m.time_embedding(9);
        assert!(a.sub(&b).unwrap().l2_norm() < a.sub(&far).unwrap().l2_norm());
    }
}
