//! Scale-factor computation, symmetric integer quantization, simulated
//! quantization, and the two-level per-vector scaling algorithm.
//!
//! All scale arithmetic is carried out in f64 internally and exported at f32,
//! so the scale chain is reproducible across platforms. Zero point is fixed
//! at 0 (symmetric, scale-only).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{self, AlphaSet, Granularity};
use crate::error::{Result, VsqError};
use crate::tensor::{Tensor, Vectorization};

/// Tie rule for rounding to nearest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    #[default]
    HalfAwayFromZero,
    HalfToEven,
}

/// Round to nearest integer under the given tie rule.
#[inline]
pub fn round_nearest(x: f64, r: Rounding) -> f64 {
    match r {
        Rounding::HalfAwayFromZero => x.round(),
        Rounding::HalfToEven => x.round_ties_even(),
    }
}

/// Which operand of a layer a quantization applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Weights,
    Activations,
}

/// Bitwidth grids from the explored design space.
pub const ELEMENT_BITS_GRID: [u8; 4] = [3, 4, 6, 8];
pub const SCALE_BITS_GRID: [u8; 5] = [3, 4, 6, 8, 10];
pub const VECTOR_SIZE_GRID: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

/// Full quantization configuration for one layer or network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    /// Weight element bitwidth.
    pub n_w: u8,
    /// Activation element bitwidth.
    pub n_a: u8,
    pub signed_w: bool,
    pub signed_a: bool,
    /// Weight per-vector scale bitwidth (unsigned).
    pub m_w: u8,
    /// Activation per-vector scale bitwidth (unsigned).
    pub m_a: u8,
    pub v: usize,
    pub granularity_w: Granularity,
    pub granularity_a: Granularity,
    pub rounding: Rounding,
    /// Override for the unsigned integer range: the default follows the
    /// symmetric formulation and clips unsigned values to [0, 2^(N-1)-1];
    /// enabling this uses the full [0, 2^N - 1] code space instead.
    pub unsigned_full_range: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            n_w: 4,
            n_a: 4,
            signed_w: true,
            signed_a: true,
            m_w: 4,
            m_a: 4,
            v: 16,
            granularity_w: Granularity::PerVector { v: 16 },
            granularity_a: Granularity::PerVector { v: 16 },
            rounding: Rounding::HalfAwayFromZero,
            unsigned_full_range: false,
        }
    }
}

impl QuantConfig {
    /// Check the configuration against the admissible design-space grid:
    /// N in {3,4,6,8}, M in {3,4,6,8,10}, V a power of two in [1, 64].
    pub fn validate_grid(&self) -> Result<()> {
        for (name, n) in [("n_w", self.n_w), ("n_a", self.n_a)] {
            if !ELEMENT_BITS_GRID.contains(&n) {
                return Err(VsqError::InvalidArgument(format!(
                    "{name}={n} outside element bitwidth grid {ELEMENT_BITS_GRID:?}"
                )));
            }
        }
        for (name, m) in [("m_w", self.m_w), ("m_a", self.m_a)] {
            if !SCALE_BITS_GRID.contains(&m) {
                return Err(VsqError::InvalidArgument(format!(
                    "{name}={m} outside scale bitwidth grid {SCALE_BITS_GRID:?}"
                )));
            }
        }
        if !VECTOR_SIZE_GRID.contains(&self.v) {
            return Err(VsqError::InvalidArgument(format!(
                "v={} must be a power of two in [1, 64]",
                self.v
            )));
        }
        Ok(())
    }

    pub fn bits(&self, op: Operand) -> u8 {
        match op {
            Operand::Weights => self.n_w,
            Operand::Activations => self.n_a,
        }
    }

    pub fn signed(&self, op: Operand) -> bool {
        match op {
            Operand::Weights => self.signed_w,
            Operand::Activations => self.signed_a,
        }
    }

    pub fn scale_bits(&self, op: Operand) -> u8 {
        match op {
            Operand::Weights => self.m_w,
            Operand::Activations => self.m_a,
        }
    }

    pub fn granularity(&self, op: Operand) -> Granularity {
        match op {
            Operand::Weights => self.granularity_w,
            Operand::Activations => self.granularity_a,
        }
    }
}

/// Largest representable integer magnitude at N bits.
#[inline]
pub fn int_max(bits: u8, signed: bool, unsigned_full_range: bool) -> i64 {
    if !signed && unsigned_full_range {
        (1i64 << bits) - 1
    } else {
        (1i64 << (bits - 1)) - 1
    }
}

/// Scale factor mapping the clip range alpha onto the integer range:
/// alpha / (2^(N-1) - 1). Returns 0 for alpha = 0.
pub fn compute_scale(alpha: f64, bits: u8) -> f64 {
    compute_scale_ext(alpha, bits, true, false)
}

pub fn compute_scale_ext(alpha: f64, bits: u8, signed: bool, unsigned_full_range: bool) -> f64 {
    if alpha == 0.0 {
        0.0
    } else {
        alpha / int_max(bits, signed, unsigned_full_range) as f64
    }
}

/// Scale, round, and clip one value to the N-bit integer range. Signed values
/// clip to [-(2^(N-1)-1), 2^(N-1)-1]; the code -2^(N-1) is never produced.
pub fn quantize_value(x: f64, s: f64, bits: u8, signed: bool, r: Rounding) -> Result<i32> {
    quantize_value_ext(x, s, bits, signed, false, r)
}

pub fn quantize_value_ext(
    x: f64,
    s: f64,
    bits: u8,
    signed: bool,
    unsigned_full_range: bool,
    r: Rounding,
) -> Result<i32> {
    if s <= 0.0 {
        return Err(VsqError::InvalidArgument(format!(
            "scale must be positive, got {s}"
        )));
    }
    let hi = int_max(bits, signed, unsigned_full_range);
    let lo = if signed { -hi } else { 0 };
    let q = round_nearest(x / s, r);
    Ok((q.max(lo as f64).min(hi as f64)) as i32)
}

/// Simulated-quantized value: the integer code rescaled back to a real value.
#[inline]
pub fn dequantize(q: i32, s: f64) -> f64 {
    s * q as f64
}

/// Whether a scale set carries one or two levels of scale factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    SingleLevel,
    TwoLevel,
}

/// Scale factors for a quantized tensor.
///
/// `per_group_fp` holds the floating-point scale s per scaling group. In
/// two-level mode it factors as `s ~= s_q * gamma` with `per_vector_int`
/// holding the M-bit unsigned s_q per vector and `coarse_fp` the real gamma
/// per coarse group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    pub mode: ScaleMode,
    pub granularity: Granularity,
    /// Per-vector scale bitwidth M (0 in single-level mode).
    pub scale_bits: u8,
    pub per_group_fp: Vec<f64>,
    pub per_vector_int: Vec<u32>,
    pub coarse_fp: Vec<f64>,
}

impl ScaleSet {
    /// Effective reconstruction scale of a scaling group.
    pub fn effective(&self, group: usize, coarse: usize) -> f64 {
        match self.mode {
            ScaleMode::SingleLevel => self.per_group_fp[group],
            ScaleMode::TwoLevel => self.per_vector_int[group] as f64 * self.coarse_fp[coarse],
        }
    }
}

/// Integer tensor with its scale set and enough metadata to reconstruct.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub int_data: Vec<i32>,
    pub scales: ScaleSet,
    pub bits: u8,
    pub signed: bool,
    pub unsigned_full_range: bool,
    pub rounding: Rounding,
}

impl QuantizedTensor {
    pub fn vectorization(&self) -> Result<Vectorization> {
        match self.scales.granularity {
            Granularity::PerVector { v } => {
                Vectorization::new(crate::tensor::ChannelLayout::of(&self.shape), v)
            }
            _ => Err(VsqError::InvalidArgument(
                "tensor is not per-vector quantized".to_string(),
            )),
        }
    }

    /// Coarse-group index of a scaling group.
    pub fn coarse_of_group(&self, group: usize) -> usize {
        match self.scales.granularity {
            Granularity::PerLayer => 0,
            Granularity::PerChannel => group,
            Granularity::PerVector { .. } => {
                let vz = self.vectorization().expect("per-vector");
                group / vz.vecs_per_group
            }
        }
    }

    fn group_of_element(&self, flat: usize) -> usize {
        let t_shape = &self.shape;
        match self.scales.granularity {
            Granularity::PerLayer => 0,
            Granularity::PerChannel => {
                let dim0 = t_shape[0];
                let total: usize = t_shape.iter().product();
                flat / (total / dim0)
            }
            Granularity::PerVector { v } => {
                let vz = Vectorization::new(crate::tensor::ChannelLayout::of(t_shape), v)
                    .expect("valid V");
                let (k, i, _) = vz.locate(flat);
                vz.flat_vector(k, i)
            }
        }
    }

    /// Element-wise simulated-quantized tensor: x_q times its effective scale.
    pub fn reconstruct(&self) -> Tensor {
        let data: Vec<f32> = self
            .int_data
            .iter()
            .enumerate()
            .map(|(flat, &q)| {
                let g = self.group_of_element(flat);
                let s = self.scales.effective(g, self.coarse_of_group(g));
                (s * q as f64) as f32
            })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("reconstruction is finite")
    }
}

fn check_alphas(t: &Tensor, granularity: Granularity, alphas: &AlphaSet) -> Result<usize> {
    if alphas.granularity != granularity {
        return Err(VsqError::InvalidArgument(format!(
            "alpha granularity {:?} does not match requested {:?}",
            alphas.granularity, granularity
        )));
    }
    let groups = match granularity {
        Granularity::PerLayer => 1,
        Granularity::PerChannel => t.shape()[0],
        Granularity::PerVector { v } => Vectorization::new(t.layout(), v)?.num_vectors(),
    };
    if alphas.alphas.len() != groups {
        return Err(VsqError::InvalidArgument(format!(
            "expected {groups} alphas, got {}",
            alphas.alphas.len()
        )));
    }
    Ok(groups)
}

/// Single-level quantization: one floating-point scale per scaling group.
///
/// Despite the name this accepts any granularity; per-vector alphas give the
/// per-vector scaled form.
pub fn quantize_single(
    t: &Tensor,
    bits: u8,
    signed: bool,
    unsigned_full_range: bool,
    granularity: Granularity,
    alphas: &AlphaSet,
    rounding: Rounding,
) -> Result<QuantizedTensor> {
    check_alphas(t, granularity, alphas)?;
    let scales: Vec<f64> = alphas
        .alphas
        .iter()
        .map(|&a| compute_scale_ext(a, bits, signed, unsigned_full_range))
        .collect();
    let int_data = quantize_elements(
        t,
        granularity,
        &scales,
        bits,
        signed,
        unsigned_full_range,
        rounding,
    )?;
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        int_data,
        scales: ScaleSet {
            mode: ScaleMode::SingleLevel,
            granularity,
            scale_bits: 0,
            per_group_fp: scales,
            per_vector_int: Vec::new(),
            coarse_fp: Vec::new(),
        },
        bits,
        signed,
        unsigned_full_range,
        rounding,
    })
}

/// Two-level quantization: the per-vector scale s(k,i) is factored into an
/// M-bit unsigned integer s_q(k,i) and a real coarse scale gamma(k) with
/// gamma(k) = max_i s(k,i) / (2^M - 1) and s_q = round(s / gamma).
#[allow(clippy::too_many_arguments)]
pub fn quantize_two_level(
    t: &Tensor,
    bits: u8,
    signed: bool,
    unsigned_full_range: bool,
    scale_bits: u8,
    v: usize,
    alphas: &AlphaSet,
    rounding: Rounding,
) -> Result<QuantizedTensor> {
    if scale_bits == 0 {
        return Err(VsqError::InvalidArgument(
            "two-level scale bitwidth M must be >= 1".to_string(),
        ));
    }
    let granularity = Granularity::PerVector { v };
    check_alphas(t, granularity, alphas)?;
    let vz = Vectorization::new(t.layout(), v)?;

    let scales: Vec<f64> = alphas
        .alphas
        .iter()
        .map(|&a| compute_scale_ext(a, bits, signed, unsigned_full_range))
        .collect();
    // x_q comes from the full-precision per-vector scale; only the
    // scale itself is further quantized.
    let int_data = quantize_elements(
        t,
        granularity,
        &scales,
        bits,
        signed,
        unsigned_full_range,
        rounding,
    )?;

    let scale_max = ((1u64 << scale_bits) - 1) as f64;
    let mut coarse_fp = Vec::with_capacity(vz.layout.coarse);
    let mut per_vector_int = vec![0u32; scales.len()];
    for k in 0..vz.layout.coarse {
        let base = k * vz.vecs_per_group;
        let s_max = scales[base..base + vz.vecs_per_group]
            .iter()
            .fold(0.0f64, |m, &s| m.max(s));
        let gamma = s_max / scale_max;
        coarse_fp.push(gamma);
        if gamma > 0.0 {
            for i in 0..vz.vecs_per_group {
                let sq = round_nearest(scales[base + i] / gamma, rounding);
                per_vector_int[base + i] = sq.clamp(0.0, scale_max) as u32;
            }
        }
    }

    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        int_data,
        scales: ScaleSet {
            mode: ScaleMode::TwoLevel,
            granularity,
            scale_bits,
            per_group_fp: scales,
            per_vector_int,
            coarse_fp,
        },
        bits,
        signed,
        unsigned_full_range,
        rounding,
    })
}

fn quantize_elements(
    t: &Tensor,
    granularity: Granularity,
    scales: &[f64],
    bits: u8,
    signed: bool,
    unsigned_full_range: bool,
    rounding: Rounding,
) -> Result<Vec<i32>> {
    let mut out = Vec::with_capacity(t.len());
    for (flat, &x) in t.data().iter().enumerate() {
        let g = calibration::group_of_element(t, granularity, flat)?;
        let s = scales[g];
        let q = if s == 0.0 {
            0
        } else {
            quantize_value_ext(x as f64, s, bits, signed, unsigned_full_range, rounding)?
        };
        out.push(q);
    }
    Ok(out)
}

/// Convenience: quantize one operand of a layer per the config, Max-style
/// alphas supplied by the caller.
pub fn quantize_operand(
    t: &Tensor,
    cfg: &QuantConfig,
    op: Operand,
    alphas: &AlphaSet,
    two_level: bool,
) -> Result<QuantizedTensor> {
    let bits = cfg.bits(op);
    let signed = cfg.signed(op);
    if two_level {
        let v = match cfg.granularity(op) {
            Granularity::PerVector { v } => v,
            g => {
                return Err(VsqError::InvalidArgument(format!(
                    "two-level quantization requires per-vector granularity, got {g:?}"
                )))
            }
        };
        quantize_two_level(
            t,
            bits,
            signed,
            cfg.unsigned_full_range,
            cfg.scale_bits(op),
            v,
            alphas,
            cfg.rounding,
        )
    } else {
        quantize_single(
            t,
            bits,
            signed,
            cfg.unsigned_full_range,
            cfg.granularity(op),
            alphas,
            cfg.rounding,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct VsqHeader {
    magic: String,
    shape: Vec<usize>,
    granularity: Granularity,
    n: u8,
    m: u8,
    signed: bool,
    unsigned_full_range: bool,
    mode: ScaleMode,
    rounding: Rounding,
    /// Coarse gamma factors (two-level) exported at f32 precision.
    gamma: Vec<f32>,
    /// Per-group fp scales (single-level) exported at f32 precision.
    scales: Vec<f32>,
}

/// Write a quantized tensor in `VSQ v1` format: one JSON header line, then
/// the int_data payload one byte per element, then the s_q array one byte
/// each (two-level only).
pub fn save_vsq(qt: &QuantizedTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| VsqError::Io {
        path: path.to_path_buf(),
        source,
    };
    let header = VsqHeader {
        magic: "VSQ1".to_string(),
        shape: qt.shape.clone(),
        granularity: qt.scales.granularity,
        n: qt.bits,
        m: qt.scales.scale_bits,
        signed: qt.signed,
        unsigned_full_range: qt.unsigned_full_range,
        mode: qt.scales.mode,
        rounding: qt.rounding,
        gamma: qt.scales.coarse_fp.iter().map(|&g| g as f32).collect(),
        scales: match qt.scales.mode {
            ScaleMode::SingleLevel => qt.scales.per_group_fp.iter().map(|&s| s as f32).collect(),
            ScaleMode::TwoLevel => Vec::new(),
        },
    };
    let mut writer = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer(&mut writer, &header)
        .map_err(|e| VsqError::MalformedConfig(e.to_string()))?;
    writer.write_all(b"\n").map_err(io)?;
    for &q in &qt.int_data {
        writer.write_all(&[(q as i8) as u8]).map_err(io)?;
    }
    if qt.scales.mode == ScaleMode::TwoLevel {
        // s_q codes are one byte for M <= 8, two little-endian bytes above
        for &sq in &qt.scales.per_vector_int {
            if qt.scales.scale_bits <= 8 {
                writer.write_all(&[sq as u8]).map_err(io)?;
            } else {
                writer.write_all(&(sq as u16).to_le_bytes()).map_err(io)?;
            }
        }
    }
    writer.flush().map_err(io)
}

/// Read a `VSQ v1` file back into a quantized tensor.
///
/// Two-level fp per-group scales are not persisted; they are restored as the
/// effective s_q * gamma products.
pub fn load_vsq(path: impl AsRef<Path>) -> Result<QuantizedTensor> {
    let path = path.as_ref();
    let io = |source| VsqError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = BufReader::new(File::open(path).map_err(io)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte).map_err(io)? == 0 {
            return Err(VsqError::MalformedHeader("missing newline".to_string()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: VsqHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| VsqError::MalformedHeader(e.to_string()))?;
    if header.magic != "VSQ1" {
        return Err(VsqError::MalformedHeader(format!(
            "bad magic {:?}",
            header.magic
        )));
    }
    let count: usize = header.shape.iter().product();
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(io)?;

    let groups = match header.granularity {
        Granularity::PerLayer => 1,
        Granularity::PerChannel => header.shape[0],
        Granularity::PerVector { v } => {
            Vectorization::new(crate::tensor::ChannelLayout::of(&header.shape), v)?.num_vectors()
        }
    };
    let sq_bytes = if header.m <= 8 { 1 } else { 2 };
    let expected = match header.mode {
        ScaleMode::SingleLevel => count,
        ScaleMode::TwoLevel => count + groups * sq_bytes,
    };
    if payload.len() != expected {
        return Err(VsqError::LengthMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let int_data: Vec<i32> = payload[..count]
        .iter()
        .map(|&b| {
            if header.signed {
                (b as i8) as i32
            } else {
                b as i32
            }
        })
        .collect();
    let (per_vector_int, coarse_fp, per_group_fp) = match header.mode {
        ScaleMode::SingleLevel => (
            Vec::new(),
            Vec::new(),
            header.scales.iter().map(|&s| s as f64).collect(),
        ),
        ScaleMode::TwoLevel => {
            let sq: Vec<u32> = if sq_bytes == 1 {
                payload[count..].iter().map(|&b| b as u32).collect()
            } else {
                payload[count..]
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
                    .collect()
            };
            let gamma: Vec<f64> = header.gamma.iter().map(|&g| g as f64).collect();
            let per_group: Vec<f64> = sq
                .iter()
                .enumerate()
                .map(|(g, &s)| {
                    let coarse = match header.granularity {
                        Granularity::PerVector { v } => {
                            let vz = Vectorization::new(
                                crate::tensor::ChannelLayout::of(&header.shape),
                                v,
                            )
                            .expect("valid header");
                            g / vz.vecs_per_group
                        }
                        _ => 0,
                    };
                    s as f64 * gamma[coarse]
                })
                .collect();
            (sq, gamma, per_group)
        }
    };
    Ok(QuantizedTensor {
        shape: header.shape,
        int_data,
        scales: ScaleSet {
            mode: header.mode,
            granularity: header.granularity,
            scale_bits: header.m,
            per_group_fp,
            per_vector_int,
            coarse_fp,
        },
        bits: header.n,
        signed: header.signed,
        unsigned_full_range: header.unsigned_full_range,
        rounding: header.rounding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::CalibMethod;

    fn max_alphas(t: &Tensor, g: Granularity) -> AlphaSet {
        calibration::calibrate(t, g, CalibMethod::Max).unwrap()
    }

    #[test]
    fn scale_formula() {
        assert_eq!(compute_scale(7.0, 4), 1.0);
        assert_eq!(compute_scale(127.0, 8), 1.0);
        assert!((compute_scale(1.0, 4) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(compute_scale(0.0, 8), 0.0);
    }

    #[test]
    fn quantize_value_clip_and_ties() {
        let r = Rounding::HalfAwayFromZero;
        assert_eq!(quantize_value(3.4, 1.0, 4, true, r).unwrap(), 3);
        assert_eq!(quantize_value(-100.0, 1.0, 4, true, r).unwrap(), -7);
        assert_eq!(quantize_value(3.5, 1.0, 4, true, r).unwrap(), 4);
        assert_eq!(quantize_value(-3.5, 1.0, 4, true, r).unwrap(), -4);
        assert_eq!(
            quantize_value(3.5, 1.0, 4, true, Rounding::HalfToEven).unwrap(),
            4
        );
        assert_eq!(
            quantize_value(2.5, 1.0, 4, true, Rounding::HalfToEven).unwrap(),
            2
        );
        // unsigned clips to [0, 2^(N-1)-1]
        assert_eq!(quantize_value(-2.0, 1.0, 4, false, r).unwrap(), 0);
        assert_eq!(quantize_value(100.0, 1.0, 4, false, r).unwrap(), 7);
        // full-range override
        assert_eq!(
            quantize_value_ext(100.0, 1.0, 4, false, true, r).unwrap(),
            15
        );
        assert!(quantize_value(1.0, 0.0, 4, true, r).is_err());
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(3, 1.0), 3.0);
        assert_eq!(dequantize(0, 123.0), 0.0);
        assert_eq!(dequantize(-7, 0.5), -3.5);
    }

    #[test]
    fn single_level_vector_example() {
        let t = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 4.0]).unwrap();
        let g = Granularity::PerVector { v: 4 };
        let qt = quantize_single(
            &t,
            4,
            true,
            false,
            g,
            &max_alphas(&t, g),
            Rounding::HalfAwayFromZero,
        )
        .unwrap();
        assert!((qt.scales.per_group_fp[0] - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(qt.int_data, vec![1, -2, 4, 7]);
    }

    #[test]
    fn v1_is_lossless() {
        let t = Tensor::new(vec![1], vec![3.3]).unwrap();
        let g = Granularity::PerVector { v: 1 };
        let qt = quantize_single(
            &t,
            4,
            true,
            false,
            g,
            &max_alphas(&t, g),
            Rounding::HalfAwayFromZero,
        )
        .unwrap();
        assert_eq!(qt.int_data, vec![7]);
        let back = qt.reconstruct();
        assert!((back.data()[0] - 3.3).abs() < 1e-6);
    }

    #[test]
    fn all_zero_vector_exact() {
        let t = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        let g = Granularity::PerVector { v: 4 };
        let qt = quantize_single(
            &t,
            4,
            true,
            false,
            g,
            &max_alphas(&t, g),
            Rounding::HalfAwayFromZero,
        )
        .unwrap();
        assert_eq!(qt.scales.per_group_fp[0], 0.0);
        assert_eq!(qt.int_data, vec![0; 4]);
        assert_eq!(qt.reconstruct().data(), &[0.0; 4]);
    }

    #[test]
    fn two_level_worked_example() {
        // channel of two V=4 vectors, N=4, M=4
        let t = Tensor::new(
            vec![1, 8],
            vec![0.5, -1.0, 2.0, 4.0, 0.1, 0.2, -0.1, 0.05],
        )
        .unwrap();
        let g = Granularity::PerVector { v: 4 };
        let qt = quantize_two_level(
            &t,
            4,
            true,
            false,
            4,
            4,
            &max_alphas(&t, g),
            Rounding::HalfAwayFromZero,
        )
        .unwrap();
        let s0 = 4.0 / 7.0;
        let s1 = 0.2f32 as f64 / 7.0;
        assert!((qt.scales.per_group_fp[0] - s0).abs() < 1e-15);
        assert!((qt.scales.per_group_fp[1] - s1).abs() < 1e-15);
        let gamma = s0 / 15.0;
        assert!((qt.scales.coarse_fp[0] - gamma).abs() < 1e-15);
        assert_eq!(qt.scales.per_vector_int, vec![15, 1]);
        // second vector reconstructs through s_q * gamma
        let back = qt.reconstruct();
        let expected = [4.0 * gamma, 7.0 * gamma, -4.0 * gamma, 2.0 * gamma];
        for (got, want) in back.data()[4..].iter().zip(expected) {
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn two_level_converges_to_single_level() {
        let t = Tensor::new(
            vec![2, 8],
            (0..16).map(|i| ((i * 29 % 17) as f32 - 8.0) / 3.0).collect(),
        )
        .unwrap();
        let g = Granularity::PerVector { v: 4 };
        let alphas = max_alphas(&t, g);
        let single =
            quantize_single(&t, 4, true, false, g, &alphas, Rounding::HalfAwayFromZero).unwrap();
        let two = quantize_two_level(&t, 4, true, false, 24, 4, &alphas, Rounding::HalfAwayFromZero)
            .unwrap();
        let a = single.reconstruct();
        let b = two.reconstruct();
        for (x, y) in a.data().iter().zip(b.data()) {
            let rel = (x - y).abs() / x.abs().max(1e-30);
            assert!(rel < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn two_level_identical_vectors_recover_scale() {
        let t = Tensor::new(vec![1, 8], vec![1.0, -2.0, 3.0, 0.5, 1.0, -2.0, 3.0, 0.5]).unwrap();
        let g = Granularity::PerVector { v: 4 };
        let qt = quantize_two_level(
            &t,
            4,
            true,
            false,
            4,
            4,
            &max_alphas(&t, g),
            Rounding::HalfAwayFromZero,
        )
        .unwrap();
        assert_eq!(qt.scales.per_vector_int, vec![15, 15]);
        let s = qt.scales.per_group_fp[0];
        assert_eq!(15.0 * qt.scales.coarse_fp[0], s);
    }

    #[test]
    fn two_level_fidelity_bound() {
        let t = Tensor::new(
            vec![3, 16],
            (0..48)
                .map(|i| ((i * 31 % 23) as f32 - 11.0) * 0.7)
                .collect(),
        )
        .unwrap();
        let g = Granularity::PerVector { v: 4 };
        for m in [3u8, 4, 6, 8, 10] {
            let qt =
                quantize_two_level(&t, 4, true, false, m, 4, &max_alphas(&t, g), Rounding::default())
                    .unwrap();
            for (grp, &s) in qt.scales.per_group_fp.iter().enumerate() {
                let gamma = qt.scales.coarse_fp[qt.coarse_of_group(grp)];
                let sq = qt.scales.per_vector_int[grp] as f64;
                assert!((sq * gamma - s).abs() <= gamma / 2.0 + 1e-15);
            }
        }
    }

    #[test]
    fn signed_codes_never_hit_min() {
        let t = Tensor::new(
            vec![64],
            (0..64).map(|i| (i * 7 % 13) as f32 - 6.0).collect(),
        )
        .unwrap();
        for n in [3u8, 4, 6, 8] {
            let g = Granularity::PerVector { v: 8 };
            let qt = quantize_single(
                &t,
                n,
                true,
                false,
                g,
                &max_alphas(&t, g),
                Rounding::default(),
            )
            .unwrap();
            let min = -(1i32 << (n - 1));
            assert!(qt.int_data.iter().all(|&q| q > min));
        }
    }

    #[test]
    fn idempotence_and_homogeneity() {
        let vals: Vec<f32> = (0..32).map(|i| ((i * 13 % 29) as f32 - 14.0) / 4.0).collect();
        let t = Tensor::new(vec![2, 16], vals.clone()).unwrap();
        let g = Granularity::PerVector { v: 4 };
        let qt = quantize_single(&t, 4, true, false, g, &max_alphas(&t, g), Rounding::default())
            .unwrap();
        let recon = qt.reconstruct();
        let qt2 = quantize_single(
            &recon,
            4,
            true,
            false,
            g,
            &max_alphas(&recon, g),
            Rounding::default(),
        )
        .unwrap();
        assert_eq!(qt.int_data, qt2.int_data);
        let recon2 = qt2.reconstruct();
        assert_eq!(recon.data(), recon2.data());

        // scaling by a positive constant leaves the integer codes unchanged
        let scaled = Tensor::new(vec![2, 16], vals.iter().map(|x| x * 3.0).collect()).unwrap();
        let qts = quantize_single(
            &scaled,
            4,
            true,
            false,
            g,
            &max_alphas(&scaled, g),
            Rounding::default(),
        )
        .unwrap();
        assert_eq!(qt.int_data, qts.int_data);
    }

    #[test]
    fn vsq_round_trip() {
        let t = Tensor::new(
            vec![2, 8],
            (0..16).map(|i| (i as f32 - 7.5) * 0.3).collect(),
        )
        .unwrap();
        let g = Granularity::PerVector { v: 4 };
        let dir = tempfile::tempdir().unwrap();
        for two_level in [false, true] {
            let qt = if two_level {
                quantize_two_level(&t, 4, true, false, 4, 4, &max_alphas(&t, g), Rounding::default())
                    .unwrap()
            } else {
                quantize_single(&t, 4, true, false, g, &max_alphas(&t, g), Rounding::default())
                    .unwrap()
            };
            let path = dir.path().join(format!("t{two_level}.vsq"));
            save_vsq(&qt, &path).unwrap();
            let back = load_vsq(&path).unwrap();
            assert_eq!(back.int_data, qt.int_data);
            assert_eq!(back.scales.per_vector_int, qt.scales.per_vector_int);
            assert_eq!(back.shape, qt.shape);
        }
    }

    #[test]
    fn grid_validation() {
        assert!(QuantConfig::default().validate_grid().is_ok());
        let bad = QuantConfig {
            n_w: 5,
            ..Default::default()
        };
        assert!(bad.validate_grid().is_err());
        let bad_v = QuantConfig {
            v: 12,
            ..Default::default()
        };
        assert!(bad_v.validate_grid().is_err());
    }
}
