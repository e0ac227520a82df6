//! KV-footprint accounting: the idealized guidance-storage ratio and
//! content-matched byte-level comparisons between visible-prompt guidance
//! and selected-layer banks.

use serde::{Deserialize, Serialize};

use crate::error::{MiError, Result};

fn default_bpe() -> u64 {
    2
}

/// One accounting scenario: a visible prompt of `prompt_tokens` cached at
/// all `layers` versus a bank of `bank_slots` at `ctrl_layers` layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetInputs {
    pub layers: u64,
    pub ctrl_layers: u64,
    pub prompt_tokens: u64,
    pub bank_slots: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    /// Storage precision; 2 bytes (half precision) by default.
    #[serde(default = "default_bpe")]
    pub bytes_per_element: u64,
}

impl BudgetInputs {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.ctrl_layers == 0
            || self.prompt_tokens == 0
            || self.bank_slots == 0
            || self.kv_heads == 0
            || self.head_dim == 0
            || self.bytes_per_element == 0
        {
            return Err(MiError::invalid("budget: all inputs must be positive"));
        }
        if self.ctrl_layers > self.layers {
            return Err(MiError::invalid("budget: ctrl_layers must not exceed layers"));
        }
        Ok(())
    }

    pub fn prompt_side(&self) -> KvSide {
        KvSide {
            layers: self.layers,
            positions: self.prompt_tokens,
            kv_heads: self.kv_heads,
            head_dim: self.head_dim,
            bytes_per_element: self.bytes_per_element,
        }
    }

    pub fn bank_side(&self) -> KvSide {
        KvSide {
            layers: self.ctrl_layers,
            positions: self.bank_slots,
            kv_heads: self.kv_heads,
            head_dim: self.head_dim,
            bytes_per_element: self.bytes_per_element,
        }
    }
}

/// One side of a content-matched comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvSide {
    pub layers: u64,
    pub positions: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    pub bytes_per_element: u64,
}

/// Idealized storage ratio: `(layers * prompt_tokens) /
/// (ctrl_layers * bank_slots)`.
pub fn kv_ratio(inputs: &BudgetInputs) -> Result<f64> {
    inputs.validate()?;
    let num = inputs.layers as u128 * inputs.prompt_tokens as u128;
    let den = inputs.ctrl_layers as u128 * inputs.bank_slots as u128;
    if den == 0 {
        return Err(MiError::invalid("budget: zero denominator"));
    }
    Ok(num as f64 / den as f64)
}

/// Exact KV bytes: `2 * layers * units * head_dim * positions *
/// bytes_per_element` (factor 2 for keys and values). Overflow-guarded.
pub fn kv_bytes(
    layers: u64,
    units: u64,
    head_dim: u64,
    positions: u64,
    bytes_per_element: u64,
) -> Result<u64> {
    if layers == 0 || units == 0 || head_dim == 0 || positions == 0 || bytes_per_element == 0 {
        return Err(MiError::invalid("kv_bytes: all inputs must be positive"));
    }
    2u64.checked_mul(layers)
        .and_then(|x| x.checked_mul(units))
        .and_then(|x| x.checked_mul(head_dim))
        .and_then(|x| x.checked_mul(positions))
        .and_then(|x| x.checked_mul(bytes_per_element))
        .ok_or_else(|| MiError::invalid("kv_bytes: byte count overflows u64"))
}

pub fn bytes_to_mib(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

/// Content-matched footprint comparison plus the idealized ratio.
#[derive(Debug, Clone, Serialize)]
pub struct BudgetReport {
    pub prompt_bytes: u64,
    pub bank_bytes: u64,
    pub prompt_mib: f64,
    pub bank_mib: f64,
    pub byte_ratio: f64,
    pub ideal_ratio: f64,
}

/// Compare a prompt-side and a bank-side setup. The two sides must agree
/// on model dimensions (kv heads, head dim); precision may differ.
pub fn budget_report(prompt: &KvSide, bank: &KvSide) -> Result<BudgetReport> {
    if prompt.kv_heads != bank.kv_heads || prompt.head_dim != bank.head_dim {
        return Err(MiError::invalid(
            "budget_report: prompt and bank setups disagree on model dimensions",
        ));
    }
    let prompt_bytes = kv_bytes(
        prompt.layers,
        prompt.kv_heads,
        prompt.head_dim,
        prompt.positions,
        prompt.bytes_per_element,
    )?;
    let bank_bytes = kv_bytes(
        bank.layers,
        bank.kv_heads,
        bank.head_dim,
        bank.positions,
        bank.bytes_per_element,
    )?;
    let ideal_num = prompt.layers as u128 * prompt.positions as u128;
    let ideal_den = bank.layers as u128 * bank.positions as u128;
    Ok(BudgetReport {
        prompt_bytes,
        bank_bytes,
        prompt_mib: bytes_to_mib(prompt_bytes),
        bank_mib: bytes_to_mib(bank_bytes),
        byte_ratio: prompt_bytes as f64 / bank_bytes as f64,
        ideal_ratio: ideal_num as f64 / ideal_den as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(layers: u64, ctrl: u64, tokens: u64, slots: u64) -> BudgetInputs {
        BudgetInputs {
            layers,
            ctrl_layers: ctrl,
            prompt_tokens: tokens,
            bank_slots: slots,
            kv_heads: 4,
            head_dim: 128,
            bytes_per_element: 2,
        }
    }

    #[test]
    fn anchor_ratio_is_exact() {
        // 48-layer decoder controlled at 5 layers, equal content
        assert_eq!(kv_ratio(&inputs(48, 5, 100, 100)).unwrap(), 9.6);
        assert_eq!(kv_ratio(&inputs(48, 48, 77, 77)).unwrap(), 1.0);
    }

    #[test]
    fn doubling_slots_halves_ratio() {
        let a = kv_ratio(&inputs(48, 5, 100, 100)).unwrap();
        let b = kv_ratio(&inputs(48, 5, 100, 200)).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_is_homogeneous() {
        let a = kv_ratio(&inputs(24, 3, 50, 20)).unwrap();
        let b = kv_ratio(&inputs(24, 3, 50 * 7, 20 * 7)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn byte_formula() {
        // 2 * 48 * 4 * 128 * 1 * 2
        assert_eq!(kv_bytes(48, 4, 128, 1, 2).unwrap(), 98_304);
        assert_eq!(kv_bytes(1, 1, 1, 1, 1).unwrap(), 2);
        // linear in positions
        let one = kv_bytes(4, 2, 64, 10, 2).unwrap();
        let three = kv_bytes(4, 2, 64, 30, 2).unwrap();
        assert_eq!(three, 3 * one);
    }

    #[test]
    fn byte_overflow_guarded() {
        assert!(kv_bytes(u64::MAX, 2, 2, 2, 2).is_err());
    }

    #[test]
    fn report_equal_setups() {
        let i = inputs(48, 48, 64, 64);
        let r = budget_report(&i.prompt_side(), &i.bank_side()).unwrap();
        assert_eq!(r.byte_ratio, 1.0);
        assert_eq!(r.ideal_ratio, 1.0);
        assert_eq!(r.prompt_bytes, r.bank_bytes);
    }

    #[test]
    fn report_matches_ratio_when_dims_shared() {
        let i = inputs(48, 5, 120, 120);
        let r = budget_report(&i.prompt_side(), &i.bank_side()).unwrap();
        assert!((r.byte_ratio - kv_ratio(&i).unwrap()).abs() < 1e-12);
        assert_eq!(r.ideal_ratio, 9.6);
    }

    #[test]
    fn more_slots_than_tokens_reports_below_ideal_equal_content() {
        let i = inputs(48, 5, 100, 250);
        let r = budget_report(&i.prompt_side(), &i.bank_side()).unwrap();
        assert!(r.byte_ratio < 9.6);
        assert!((r.ideal_ratio - r.byte_ratio).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(kv_ratio(&inputs(5, 6, 1, 1)).is_err());
        let mut i = inputs(4, 2, 1, 1);
        i.bank_slots = 0;
        assert!(kv_ratio(&i).is_err());
    }
}
