use serde::{Deserialize, Serialize};

use super::config::ThresholdConfig;
use super::Toggles;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Recompute,
    Reuse,
    Prune,
    /// The output head; runs every step.
    Head,
}

/// One line of the decision trace: what happened to one layer at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub t: usize,
    /// Block index; the head uses the number of blocks.
    pub layer: usize,
    pub action: Action,
    /// Divergence measured after this step's recompute, if there was a cache
    /// entry to compare against.
    #[serde(rename = "D")]
    pub divergence: Option<f64>,
    /// Similarity to the previous layer consulted by the prune decision.
    #[serde(rename = "S")]
    pub similarity: Option<f64>,
    /// Activation bit-width of the step; `None` means full precision.
    pub bits: Option<u8>,
    pub weight_bits: Option<u8>,
    pub macs: u64,
    /// MACs weighted by operand width: 16 per floating-point MAC, the wider
    /// operand's bit-width per integer MAC.
    pub bit_macs: u64,
    /// Age of the cache entry when the step was planned.
    pub age: Option<usize>,
    /// Refresh interval of that entry.
    pub tau: Option<usize>,
    /// Interval assigned by this step's recompute.
    pub new_tau: Option<usize>,
    /// Cumulative variation at planning time.
    #[serde(rename = "V")]
    pub variation: Option<f64>,
    pub p_prune: Option<f64>,
    pub draw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_us: Option<u64>,
}

impl TraceRecord {
    /// Structural checks a record must pass on import.
    pub fn check(&self, layers: usize) -> Result<(), String> {
        let head = self.layer == layers;
        if self.layer > layers {
            return Err(format!("layer {} beyond {layers} blocks", self.layer));
        }
        if head != (self.action == Action::Head) {
            return Err(format!("action {:?} on layer {}", self.action, self.layer));
        }
        if matches!(self.action, Action::Reuse | Action::Prune)
            && (self.macs != 0 || self.bit_macs != 0)
        {
            return Err(format!("{:?} billed {} MACs", self.action, self.macs));
        }
        if self.action == Action::Reuse {
            match (self.age, self.tau) {
                (Some(a), Some(tau)) if a < tau => {}
                _ => return Err("reuse without a live cache entry".into()),
            }
        }
        for (name, v) in [("D", self.divergence), ("V", self.variation)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(format!("{name} = {v} must be finite and non-negative"));
                }
            }
        }
        if let Some(s) = self.similarity {
            if !(-1.0..=1.0).contains(&s) {
                return Err(format!("S = {s} outside [-1, 1]"));
            }
        }
        for (name, v) in [("p_prune", self.p_prune), ("draw", self.draw)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("{name} = {v} outside [0, 1]"));
                }
            }
        }
        if let Some(b) = self.bits {
            if ![4, 6, 8].contains(&b) {
                return Err(format!("bits = {b}"));
            }
        }
        Ok(())
    }
}

/// First line of an exported trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub layers: usize,
    pub timesteps: usize,
    pub prune_seed: u64,
    pub toggles: Toggles,
    pub thresholds: ThresholdConfig,
    /// Static cost of one recomputed block.
    pub block_macs: u64,
    pub head_macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn executed_macs(&self) -> u64 {
        self.records.iter().map(|r| r.macs).sum()
    }

    pub fn executed_bit_macs(&self) -> u64 {
        self.records.iter().map(|r| r.bit_macs).sum()
    }

    pub fn count(&self, action: Action) -> usize {
        self.records.iter().filter(|r| r.action == action).count()
    }
}
