//! Analytical cost reporting: memory overhead, effective bitwidth, datapath
//! wire widths, and the extra scale-product multiplier dimensions.
//!
//! Widths come from the same formulas the datapath simulator enforces; a
//! cross-module test keeps the two in sync. Energy and area are deliberately
//! not modeled.

use serde::{Deserialize, Serialize};

use crate::datapath::DatapathConfig;
use crate::error::{Result, VsqError};

/// Closed-form cost summary for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// Per-operand breakdown (weights, activations).
    pub weights: OperandCost,
    pub activations: OperandCost,
    pub dot_width_bits: u8,
    pub partial_sum_width_bits: u8,
    /// Operand widths of the extra per-vector scale multiply
    /// (dot width x rounded scale-product width); absent when both operands
    /// are coarse-scaled.
    pub extra_multiply_dims: Option<(u8, u8)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperandCost {
    pub element_bits: u8,
    pub scale_bits: u8,
    pub vector_size: usize,
    pub memory_overhead_fraction: f64,
    pub effective_bitwidth: f64,
}

/// Storage overhead of an M-bit scale per V-element vector of N-bit values:
/// M / (V * N).
pub fn memory_overhead(n: u8, m: u8, v: usize) -> Result<f64> {
    if n == 0 || v == 0 {
        return Err(VsqError::InvalidArgument(
            "N and V must be positive".to_string(),
        ));
    }
    Ok(m as f64 / (v as f64 * n as f64))
}

/// Effective storage bits per element: N + M/V.
pub fn effective_bitwidth(n: u8, m: u8, v: usize) -> Result<f64> {
    if v == 0 {
        return Err(VsqError::InvalidArgument("V must be positive".to_string()));
    }
    Ok(n as f64 + m as f64 / v as f64)
}

/// Instantiate the width formulas for a datapath configuration.
pub fn datapath_widths(cfg: &DatapathConfig) -> Result<CostReport> {
    cfg.validate()?;
    let operand = |n: u8, m: u8| -> Result<OperandCost> {
        Ok(OperandCost {
            element_bits: n,
            scale_bits: m,
            vector_size: cfg.v,
            memory_overhead_fraction: memory_overhead(n, m, cfg.v)?,
            effective_bitwidth: effective_bitwidth(n, m, cfg.v)?,
        })
    };
    let b = cfg.scale_bits_after_rounding();
    Ok(CostReport {
        weights: operand(cfg.n_w, cfg.m_w.bits())?,
        activations: operand(cfg.n_a, cfg.m_a.bits())?,
        dot_width_bits: cfg.dot_width(),
        partial_sum_width_bits: cfg.partial_sum_width(),
        extra_multiply_dims: if b == 0 {
            None
        } else {
            Some((cfg.dot_width(), b))
        },
    })
}
