use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight bit-widths available to the allocator, ascending.
pub const WEIGHT_BIT_LEVELS: [u8; 3] = [4, 6, 8];

/// Relative quantization error of a `b`-bit layer versus the 4-bit floor,
/// `2^(−2(b−4))` (error power scales with `s² ∝ 4^(−b)`).
pub fn bit_penalty(bits: u8) -> f64 {
    (-2.0 * (bits as f64 - 4.0)).exp2()
}

/// Per-layer weight bit-widths under a total budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightBitPlan {
    pub bits_per_layer: Vec<u8>,
    pub budget: u32,
}

impl WeightBitPlan {
    pub fn uniform(layers: usize, bits: u8) -> Self {
        Self {
            bits_per_layer: vec![bits; layers],
            budget: bits as u32 * layers as u32,
        }
    }

    pub fn total_bits(&self) -> u32 {
        self.bits_per_layer.iter().map(|&b| b as u32).sum()
    }

    pub fn bits(&self, layer: usize) -> u8 {
        self.bits_per_layer[layer]
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.bits_per_layer.len() != layers {
            return Err(Error::config(
                "weight_bits.bits_per_layer",
                format!("{} entries for {layers} layers", self.bits_per_layer.len()),
            ));
        }
        if let Some(b) = self
            .bits_per_layer
            .iter()
            .find(|b| !WEIGHT_BIT_LEVELS.contains(b))
        {
            return Err(Error::config(
                "weight_bits.bits_per_layer",
                format!("{b} is not one of {WEIGHT_BIT_LEVELS:?}"),
            ));
        }
        if self.total_bits() > self.budget {
            return Err(Error::config(
                "weight_bits.budget",
                format!(
                    "plan uses {} bits, budget is {}",
                    self.total_bits(),
                    self.budget
                ),
            ));
        }
        Ok(())
    }

    /// `Σ_l sensitivity_l · penalty(B(l))`, the quantity the allocator minimises.
    pub fn objective(&self, sensitivities: &[f64]) -> f64 {
        self.bits_per_layer
            .iter()
            .zip(sensitivities)
            .map(|(&b, &s)| s * bit_penalty(b))
            .sum()
    }
}

/// Greedy budgeted allocation.
///
/// Every layer starts at 4 bits. While budget remains, the layer whose next
/// upgrade buys the largest penalty reduction per extra bit moves up one
/// level; ties go to the lowest layer index.
pub fn allocate_weight_bits(sensitivities: &[f64], budget: u32) -> Result<WeightBitPlan> {
    let layers = sensitivities.len();
    let floor = WEIGHT_BIT_LEVELS[0] as u32 * layers as u32;
    if budget < floor {
        return Err(Error::config(
            "weight_bits.budget",
            format!("budget {budget} is below the {floor}-bit floor for {layers} layers"),
        ));
    }
    if let Some(s) = sensitivities
        .iter()
        .find(|s| !(s.is_finite() && **s >= 0.0))
    {
        return Err(Error::Input(format!(
            "sensitivity {s} must be finite and non-negative"
        )));
    }
    let mut level = vec![0usize; layers];
    let mut used = floor;
    loop {
        let mut best: Option<(usize, f64)> = None;
        for l in 0..layers {
            let Some(&next) = WEIGHT_BIT_LEVELS.get(level[l] + 1) else {
                continue;
            };
            let cur = WEIGHT_BIT_LEVELS[level[l]];
            let extra = (next - cur) as u32;
            if used + extra > budget {
                continue;
            }
            let gain = sensitivities[l] * (bit_penalty(cur) - bit_penalty(next)) / extra as f64;
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((l, gain));
            }
        }
        let Some((l, _)) = best else { break };
        used += (WEIGHT_BIT_LEVELS[level[l] + 1] - WEIGHT_BIT_LEVELS[level[l]]) as u32;
        level[l] += 1;
    }
    Ok(WeightBitPlan {
        bits_per_layer: level.iter().map(|&i| WEIGHT_BIT_LEVELS[i]).collect(),
        budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_values() {
        assert_eq!(bit_penalty(4), 1.0);
        assert_eq!(bit_penalty(6), 1.0 / 16.0);
        assert_eq!(bit_penalty(8), 1.0 / 256.0);
    }

    #[test]
    fn budget_forced_and_slack() {
        let p = allocate_weight_bits(&[1.0; 5], 20).unwrap();
        assert_eq!(p.bits_per_layer, vec![4; 5]);
        let p = allocate_weight_bits(&[0.3, 0.0, 9.0], 100).unwrap();
        assert_eq!(p.bits_per_layer, vec![8; 3]);
    }

    #[test]
    fn infeasible_budget() {
        assert!(matches!(
            allocate_weight_bits(&[1.0; 4], 15),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn most_sensitive_layers_upgrade_first() {
        // two upgrades: layer 2 first, then layer 0 (0.47 per bit) beats
        // layer 2's second step (0.26 per bit)
        let p = allocate_weight_bits(&[1.0, 0.1, 9.0, 0.5], 20).unwrap();
        assert_eq!(p.bits_per_layer, vec![6, 4, 6, 4]);
        assert!(p.total_bits() <= p.budget);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let p = allocate_weight_bits(&[2.0, 2.0, 2.0], 14).unwrap();
        assert_eq!(p.bits_per_layer, vec![6, 4, 4]);
    }

    #[test]
    fn plan_validation() {
        let plan = WeightBitPlan {
            bits_per_layer: vec![8, 8],
            budget: 12,
        };
        assert!(plan.validate(2).is_err());
        assert!(WeightBitPlan::uniform(3, 6).validate(3).is_ok());
        let odd = WeightBitPlan {
            bits_per_layer: vec![5],
            budget: 8,
        };
        assert!(odd.validate(1).is_err());
    }
}
