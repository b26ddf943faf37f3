//! Bit-exact integer model of the per-vector-scaled processing element:
//! vector MAC with scale-factor product, optional scale-product rounding,
//! accumulation collector, and post-processing unit with dynamic per-vector
//! recalibration.
//!
//! Every intermediate is checked against the widths declared in
//! [`DatapathConfig`]; a violation is an internal error and must be
//! unreachable when operands respect their contracts.

use serde::{Deserialize, Serialize};

use crate::calibration::{self, CalibMethod, Granularity};
use crate::error::{Result, VsqError};
use crate::quant::{self, QuantizedTensor, Rounding, ScaleMode};
use crate::tensor::Tensor;

/// Per-vector scale width of one operand; `Coarse` is the dash of the
/// W/A/ws/as notation (no per-vector scale, coarse-only scaling in the PPU).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleWidth {
    Coarse,
    Bits(u8),
}

impl ScaleWidth {
    pub fn bits(&self) -> u8 {
        match self {
            ScaleWidth::Coarse => 0,
            ScaleWidth::Bits(b) => *b,
        }
    }
}

impl Serialize for ScaleWidth {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ScaleWidth::Coarse => ser.serialize_str("-"),
            ScaleWidth::Bits(b) => ser.serialize_u8(*b),
        }
    }
}

impl<'de> Deserialize<'de> for ScaleWidth {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u8),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(b) => Ok(ScaleWidth::Bits(b)),
            Raw::Text(s) if s == "-" => Ok(ScaleWidth::Coarse),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "scale width must be a number or \"-\", got {s:?}"
            ))),
        }
    }
}

/// Derived bit-widths of every wire in the simulated PE.
///
/// JSON form follows the W/A/ws/as notation, e.g.
/// `{"W":4,"A":4,"ws":4,"as":4,"scale_product_bits":6}` with `"-"` for a
/// coarse-scaled operand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatapathConfig {
    #[serde(rename = "W")]
    pub n_w: u8,
    #[serde(rename = "A")]
    pub n_a: u8,
    #[serde(rename = "ws")]
    pub m_w: ScaleWidth,
    #[serde(rename = "as")]
    pub m_a: ScaleWidth,
    #[serde(rename = "V", default = "default_v")]
    pub v: usize,
    /// Target scale-product width B after rounding; equal to ws+as bits
    /// means no rounding.
    #[serde(default)]
    pub scale_product_bits: Option<u8>,
    #[serde(default = "default_guard")]
    pub accum_guard_bits: u8,
}

fn default_v() -> usize {
    16
}

fn default_guard() -> u8 {
    12
}

impl DatapathConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_w < 2 || self.n_a < 2 {
            return Err(VsqError::InvalidArgument(
                "element bitwidths must be >= 2".to_string(),
            ));
        }
        if !self.v.is_power_of_two() {
            return Err(VsqError::InvalidArgument(format!(
                "V={} must be a power of two",
                self.v
            )));
        }
        if self.scale_bits_after_rounding() > self.scale_total_bits() {
            return Err(VsqError::InvalidArgument(format!(
                "scale_product_bits {} exceeds ws+as = {}",
                self.scale_bits_after_rounding(),
                self.scale_total_bits()
            )));
        }
        Ok(())
    }

    /// Combined width of both per-vector scale operands (ws + as).
    pub fn scale_total_bits(&self) -> u8 {
        self.m_w.bits() + self.m_a.bits()
    }

    /// Width B of the scale product after optional rounding.
    pub fn scale_bits_after_rounding(&self) -> u8 {
        self.scale_product_bits.unwrap_or(self.scale_total_bits())
    }

    /// Power-of-two compensation restored in the PPU after scale-product
    /// rounding.
    pub fn exponent_comp(&self) -> u8 {
        self.scale_total_bits() - self.scale_bits_after_rounding()
    }

    pub fn product_width(&self) -> u8 {
        self.n_w + self.n_a
    }

    /// Dot-product output width: N_w + N_a + log2(V).
    pub fn dot_width(&self) -> u8 {
        self.product_width() + self.v.trailing_zeros() as u8
    }

    /// Partial-sum width: dot width + B.
    pub fn partial_sum_width(&self) -> u8 {
        self.dot_width() + self.scale_bits_after_rounding()
    }

    pub fn collector_width(&self) -> u8 {
        self.partial_sum_width() + self.accum_guard_bits
    }
}

/// One scaled dot-product output awaiting accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartialSum {
    pub value: i128,
    /// Power-of-two compensation from scale-product rounding; identical for
    /// every partial sum merged into one collector.
    pub exponent_comp: u8,
}

fn fits_signed(value: i128, width: u8) -> bool {
    let cap = (1i128 << (width - 1)) - 1;
    value.abs() <= cap
}

/// Round an unsigned scale product from `total_bits` down to `b` bits,
/// round-to-nearest with half-away ties, saturating at 2^b - 1. The dropped
/// bits are returned as the exponent compensation. `b == total_bits` is the
/// identity.
pub fn round_scale_product(p: u64, total_bits: u8, b: u8) -> Result<(u64, u8)> {
    if b > total_bits {
        return Err(VsqError::InvalidArgument(format!(
            "target width {b} exceeds scale product width {total_bits}"
        )));
    }
    let shift = total_bits - b;
    if shift == 0 {
        return Ok((p, 0));
    }
    let half = 1u64 << (shift - 1);
    let rounded = (p + half) >> shift;
    let cap = (1u64 << b) - 1;
    Ok((rounded.min(cap), shift))
}

/// V-element integer dot product scaled by the (optionally rounded) product
/// of the per-vector scale factors.
pub fn vector_mac(
    w_q: &[i32],
    a_q: &[i32],
    s_qw: u32,
    s_qa: u32,
    cfg: &DatapathConfig,
) -> Result<PartialSum> {
    if w_q.len() != cfg.v || a_q.len() != cfg.v {
        return Err(VsqError::ContractViolation(format!(
            "operand length {} / {} != V = {}",
            w_q.len(),
            a_q.len(),
            cfg.v
        )));
    }
    let w_cap = (1i64 << (cfg.n_w - 1)) - 1;
    let a_cap = (1i64 << (cfg.n_a - 1)) - 1;
    for &w in w_q {
        if (w as i64).abs() > w_cap {
            return Err(VsqError::ContractViolation(format!(
                "weight operand {w} exceeds {}-bit range",
                cfg.n_w
            )));
        }
    }
    for &a in a_q {
        if (a as i64).abs() > a_cap {
            return Err(VsqError::ContractViolation(format!(
                "activation operand {a} exceeds {}-bit range",
                cfg.n_a
            )));
        }
    }
    let check_scale = |s: u32, w: ScaleWidth, name: &str| -> Result<()> {
        match w {
            ScaleWidth::Coarse if s != 1 => Err(VsqError::ContractViolation(format!(
                "{name} scale must be 1 for a coarse-scaled operand, got {s}"
            ))),
            ScaleWidth::Bits(b) if s as u64 > (1u64 << b) - 1 => Err(
                VsqError::ContractViolation(format!("{name} scale {s} exceeds {b}-bit range")),
            ),
            _ => Ok(()),
        }
    };
    check_scale(s_qw, cfg.m_w, "weight")?;
    check_scale(s_qa, cfg.m_a, "activation")?;

    let mut dot: i64 = 0;
    for (&w, &a) in w_q.iter().zip(a_q) {
        let product = w as i64 * a as i64;
        if !fits_signed(product as i128, cfg.product_width()) {
            return Err(VsqError::Internal(format!(
                "product {product} exceeds {}-bit width",
                cfg.product_width()
            )));
        }
        dot += product;
    }
    if !fits_signed(dot as i128, cfg.dot_width()) {
        return Err(VsqError::Internal(format!(
            "dot {dot} exceeds {}-bit width",
            cfg.dot_width()
        )));
    }

    let p = s_qw as u64 * s_qa as u64;
    let (p_rounded, exponent_comp) = round_scale_product(
        p,
        cfg.scale_total_bits(),
        cfg.scale_bits_after_rounding(),
    )?;
    let value = dot as i128 * p_rounded as i128;
    if !fits_signed(value, cfg.partial_sum_width().max(cfg.dot_width())) {
        return Err(VsqError::Internal(format!(
            "partial sum {value} exceeds {}-bit width",
            cfg.partial_sum_width()
        )));
    }
    Ok(PartialSum {
        value,
        exponent_comp,
    })
}

/// Accumulation collector: exact wide-integer addition of partial sums
/// sharing one exponent compensation.
#[derive(Debug, Clone, Copy)]
pub struct Collector {
    value: i128,
    exponent_comp: u8,
    width: u8,
}

impl Collector {
    pub fn new(cfg: &DatapathConfig) -> Self {
        Collector {
            value: 0,
            exponent_comp: cfg.exponent_comp(),
            width: cfg.collector_width(),
        }
    }

    pub fn value(&self) -> i128 {
        self.value
    }

    pub fn exponent_comp(&self) -> u8 {
        self.exponent_comp
    }

    pub fn accumulate(&mut self, ps: PartialSum) -> Result<()> {
        if ps.exponent_comp != self.exponent_comp {
            return Err(VsqError::ContractViolation(format!(
                "exponent compensation mismatch: collector {}, partial sum {}",
                self.exponent_comp, ps.exponent_comp
            )));
        }
        let next = self.value + ps.value;
        if !fits_signed(next, self.width) {
            return Err(VsqError::Internal(format!(
                "collector overflow: {next} exceeds {}-bit width",
                self.width
            )));
        }
        self.value = next;
        Ok(())
    }
}

/// PPU output stage: apply the power-of-two rounding compensation and the
/// coarse scale factors, then optional bias and ReLU.
pub fn ppu_finalize(
    acc: i128,
    gamma_w: f64,
    gamma_a: f64,
    exponent_comp: u8,
    bias: Option<f64>,
    relu: bool,
) -> f64 {
    let mut y = acc as f64 * (1u64 << exponent_comp) as f64 * gamma_w * gamma_a;
    if let Some(b) = bias {
        y += b;
    }
    if relu && y < 0.0 {
        y = 0.0;
    }
    y
}

/// Dynamic per-vector recalibration of layer outputs: abs-max per vector,
/// scale, and integer conversion, optionally with two-level scale
/// factorization over the output tensor.
#[allow(clippy::too_many_arguments)]
pub fn ppu_requantize(
    outputs: &Tensor,
    n_a: u8,
    m_a: u8,
    v: usize,
    signed: bool,
    unsigned_full_range: bool,
    mode: ScaleMode,
    rounding: Rounding,
) -> Result<QuantizedTensor> {
    let g = Granularity::PerVector { v };
    let alphas = calibration::calibrate(outputs, g, CalibMethod::Max)?;
    match mode {
        ScaleMode::SingleLevel => quant::quantize_single(
            outputs,
            n_a,
            signed,
            unsigned_full_range,
            g,
            &alphas,
            rounding,
        ),
        ScaleMode::TwoLevel => quant::quantize_two_level(
            outputs,
            n_a,
            signed,
            unsigned_full_range,
            m_a,
            v,
            &alphas,
            rounding,
        ),
    }
}
