use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{matmul_fp, Tensor};

/// The linear projections inside one block, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    /// Fused self-attention query/key/value projection.
    SelfQkv,
    SelfOut,
    CrossQ,
    /// Fused cross-attention key/value projection of the conditioning tokens.
    CrossKv,
    CrossOut,
    FfnUp,
    FfnDown,
}

impl LinearKind {
    pub const ALL: [LinearKind; 7] = [
        LinearKind::SelfQkv,
        LinearKind::SelfOut,
        LinearKind::CrossQ,
        LinearKind::CrossKv,
        LinearKind::CrossOut,
        LinearKind::FfnUp,
        LinearKind::FfnDown,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LinearKind::SelfQkv => "self_qkv",
            LinearKind::SelfOut => "self_out",
            LinearKind::CrossQ => "cross_q",
            LinearKind::CrossKv => "cross_kv",
            LinearKind::CrossOut => "cross_out",
            LinearKind::FfnUp => "ffn_up",
            LinearKind::FfnDown => "ffn_down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LinearSite {
    pub layer: usize,
    pub kind: LinearKind,
}

/// What to do with a block before it runs.
#[derive(Debug, Clone)]
pub enum BlockOverride {
    Run,
    /// Skip the block and use this tensor as its output.
    Replace(Tensor),
}

/// Interception points in the forward pass.
///
/// The default methods describe the plain model: every block runs, every
/// projection is a full-precision `matmul_fp`, nothing is recorded.
pub trait LayerHooks {
    fn before_block(&mut self, _layer: usize, _input: &Tensor) -> Result<BlockOverride> {
        Ok(BlockOverride::Run)
    }

    fn after_block(&mut self, _layer: usize, _input: &Tensor, _output: &Tensor) -> Result<()> {
        Ok(())
    }

    /// Computes `x·w` for one projection; the place to swap in quantized weights
    /// and activations.
    fn linear(&mut self, _site: LinearSite, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        matmul_fp(x, w)
    }

    /// Multiply-accumulates executed by block `layer` (`None` for the output head).
    fn record_macs(&mut self, _layer: Option<usize>, _macs: u64) {}
}

/// The plain model.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHooks;

impl LayerHooks for NoHooks {}

/// Sums MACs per layer and otherwise leaves the forward pass alone.
#[derive(Debug, Default, Clone)]
pub struct MacCounter {
    pub per_layer: Vec<u64>,
    pub head: u64,
}

impl LayerHooks for MacCounter {
    fn record_macs(&mut self, layer: Option<usize>, macs: u64) {
        match layer {
            Some(l) => {
                if self.per_layer.len() <= l {
                    self.per_layer.resize(l + 1, 0);
                }
                self.per_layer[l] += macs;
            }
            None => self.head += macs,
        }
    }
}
