//! Small convolution and linear layers executed through the quantized
//! datapath, with a full-precision reference path as oracle.
//!
//! The quantized path lowers each output as a direct loop nest with vectors
//! drawn along the input-channel dimension; every multiply-accumulate goes
//! through the datapath simulator. Inter-layer activations are carried as
//! real tensors and requantized dynamically at each layer boundary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{self, CalibMethod, Granularity};
use crate::datapath::{self, Collector, DatapathConfig, ScaleWidth};
use crate::error::{Result, VsqError};
use crate::quant::{self, Operand, QuantConfig, QuantizedTensor, ScaleMode};
use crate::tensor::{ChannelLayout, Tensor, Vectorization};

/// One layer of a network with resolved weights.
#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    /// Conv weights `[K, C, R, S]` or linear weights `[K, C]`.
    pub weights: Tensor,
    pub bias: Option<Vec<f64>>,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
}

/// A feed-forward stack of conv/linear layers.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_shape: Vec<usize>,
}

/// Serializable network description; weights come from VST files or from the
/// seeded generator when no file is given.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub quant: QuantConfig,
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKindSpec {
    Conv2d {
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

fn one() -> usize {
    1
}

// `deny_unknown_fields` cannot be combined with `flatten`; strict key
// checking happens at the NetworkSpec level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKindSpec,
    #[serde(default)]
    pub relu: bool,
    /// VST file with the layer weights, relative to the spec file.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub bias: Option<Vec<f64>>,
}

impl NetworkSpec {
    pub fn parse(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| VsqError::MalformedConfig(e.to_string()))
    }

    /// Load weight files (relative to `base_dir`) or generate seeded weights
    /// for layers without a file.
    pub fn resolve(&self, base_dir: &Path) -> Result<Network> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (idx, spec) in self.layers.iter().enumerate() {
            let (shape, stride, padding) = match spec.kind {
                LayerKindSpec::Conv2d {
                    out_channels,
                    in_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                } => (
                    vec![out_channels, in_channels, kernel_h, kernel_w],
                    stride,
                    padding,
                ),
                LayerKindSpec::Linear {
                    in_features,
                    out_features,
                } => (vec![out_features, in_features, 1, 1], 1, 0),
            };
            let weights = match &spec.weights {
                Some(p) => {
                    let t = Tensor::load(base_dir.join(p))?;
                    let t = to_conv_weights(&t)?;
                    if t.shape() != shape.as_slice() {
                        return Err(VsqError::ShapeMismatch(format!(
                            "layer {idx}: weight file shape {:?} does not match spec {shape:?}",
                            t.shape()
                        )));
                    }
                    t
                }
                None => crate::fixture::seeded_tensor(&shape, self.seed.wrapping_add(idx as u64), 1.0)?,
            };
            layers.push(Layer {
                name: format!("layer{idx}"),
                weights,
                bias: spec.bias.clone(),
                stride,
                padding,
                relu: spec.relu,
            });
        }
        Ok(Network {
            layers,
            input_shape: self.input_shape.clone(),
        })
    }
}

/// Reshape 2-D linear weights to 4-D conv form; identical channel layout.
fn to_conv_weights(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        [k, c] => Tensor::new(vec![*k, *c, 1, 1], t.data().to_vec()),
        [_, _, _, _] => Ok(t.clone()),
        s => Err(VsqError::ShapeMismatch(format!(
            "weights must be 2-D or 4-D, got {s:?}"
        ))),
    }
}

/// Reshape a 1-D activation to 3-D; identical channel layout.
pub fn to_conv_activations(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        [c] => Tensor::new(vec![*c, 1, 1], t.data().to_vec()),
        [_, _, _] => Ok(t.clone()),
        s => Err(VsqError::ShapeMismatch(format!(
            "activations must be 1-D or 3-D, got {s:?}"
        ))),
    }
}

fn conv_output_dims(
    input: &[usize],
    weights: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize)> {
    let (c, h, w) = (input[0], input[1], input[2]);
    let (k, wc, r, s) = (weights[0], weights[1], weights[2], weights[3]);
    if c != wc {
        return Err(VsqError::ShapeMismatch(format!(
            "input channels {c} != weight channels {wc}"
        )));
    }
    if stride == 0 {
        return Err(VsqError::InvalidArgument("stride must be >= 1".to_string()));
    }
    let h_pad = h + 2 * padding;
    let w_pad = w + 2 * padding;
    if h_pad < r || w_pad < s {
        return Err(VsqError::ShapeMismatch(format!(
            "kernel {r}x{s} larger than padded input {h_pad}x{w_pad}"
        )));
    }
    Ok((k, (h_pad - r) / stride + 1, (w_pad - s) / stride + 1))
}

/// Full-precision reference convolution, f64 accumulation, deterministic
/// (channel, kernel-row, kernel-col) order.
pub fn conv2d_reference(
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    padding: usize,
    bias: Option<&[f64]>,
    relu: bool,
) -> Result<Tensor> {
    let input = to_conv_activations(input)?;
    let weights = to_conv_weights(weights)?;
    let (k_out, h_out, w_out) = conv_output_dims(input.shape(), weights.shape(), stride, padding)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (r_dim, s_dim) = (weights.shape()[2], weights.shape()[3]);
    if let Some(b) = bias {
        if b.len() != k_out {
            return Err(VsqError::ShapeMismatch(format!(
                "bias length {} != output channels {k_out}",
                b.len()
            )));
        }
    }
    let mut out = vec![0.0f32; k_out * h_out * w_out];
    for k in 0..k_out {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = 0.0f64;
                for ci in 0..c {
                    for r in 0..r_dim {
                        for s in 0..s_dim {
                            let iy = (oy * stride + r) as isize - padding as isize;
                            let ix = (ox * stride + s) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                continue;
                            }
                            let wv = weights.data()
                                [((k * c + ci) * r_dim + r) * s_dim + s]
                                as f64;
                            let av =
                                input.data()[(ci * h + iy as usize) * w + ix as usize] as f64;
                            acc += wv * av;
                        }
                    }
                }
                if let Some(b) = bias {
                    acc += b[k];
                }
                if relu && acc < 0.0 {
                    acc = 0.0;
                }
                out[(k * h_out + oy) * w_out + ox] = acc as f32;
            }
        }
    }
    Tensor::new(vec![k_out, h_out, w_out], out)
}

/// Full-precision reference for a linear layer (weights `[K, C]`, input `[C]`).
pub fn linear_reference(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&[f64]>,
    relu: bool,
) -> Result<Tensor> {
    let out = conv2d_reference(input, weights, 1, 0, bias, relu)?;
    let k = out.shape()[0];
    Tensor::new(vec![k], out.data().to_vec())
}

struct OperandScales<'a> {
    qt: &'a QuantizedTensor,
    vz: Option<Vectorization>,
}

impl<'a> OperandScales<'a> {
    fn build(qt: &'a QuantizedTensor, width: ScaleWidth, v: usize, name: &str) -> Result<Self> {
        let vz = match (qt.scales.granularity, qt.scales.mode, width) {
            (Granularity::PerVector { v: qv }, ScaleMode::TwoLevel, ScaleWidth::Bits(b)) => {
                if qv != v {
                    return Err(VsqError::InvalidArgument(format!(
                        "{name}: quantized V={qv} does not match datapath V={v}"
                    )));
                }
                if qt.scales.scale_bits != b {
                    return Err(VsqError::InvalidArgument(format!(
                        "{name}: scale bits {} do not match datapath {b}",
                        qt.scales.scale_bits
                    )));
                }
                Some(Vectorization::new(ChannelLayout::of(&qt.shape), v)?)
            }
            (Granularity::PerLayer | Granularity::PerChannel, ScaleMode::SingleLevel, ScaleWidth::Coarse) => {
                None
            }
            (g, m, w) => {
                return Err(VsqError::InvalidArgument(format!(
                    "{name}: unsupported scale shape for the integer datapath \
                     (granularity {g:?}, mode {m:?}, width {w:?})"
                )))
            }
        };
        Ok(OperandScales { qt, vz })
    }

    /// Integer per-vector scale for vector (k, cv, sp); 1 for coarse operands.
    fn s_q(&self, k: usize, cv: usize, sp: usize) -> u32 {
        match &self.vz {
            Some(vz) => {
                let i = cv * vz.layout.spatial + sp;
                self.qt.scales.per_vector_int[vz.flat_vector(k, i)]
            }
            None => 1,
        }
    }

    /// Coarse scale factor for coarse group k.
    fn gamma(&self, k: usize) -> f64 {
        match self.qt.scales.mode {
            ScaleMode::TwoLevel => self.qt.scales.coarse_fp[k],
            ScaleMode::SingleLevel => match self.qt.scales.granularity {
                Granularity::PerLayer => self.qt.scales.per_group_fp[0],
                Granularity::PerChannel => self.qt.scales.per_group_fp[k],
                Granularity::PerVector { .. } => unreachable!("rejected in build"),
            },
        }
    }
}

/// Quantized convolution computed exclusively through the datapath simulator
/// (vector MAC, collector, PPU). Returns real outputs before requantization.
pub fn conv2d_quantized(
    acts: &QuantizedTensor,
    weights: &QuantizedTensor,
    stride: usize,
    padding: usize,
    bias: Option<&[f64]>,
    relu: bool,
    dcfg: &DatapathConfig,
) -> Result<Tensor> {
    conv2d_quantized_impl(acts, weights, stride, padding, bias, relu, dcfg, false)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_quantized_impl(
    acts: &QuantizedTensor,
    weights: &QuantizedTensor,
    stride: usize,
    padding: usize,
    bias: Option<&[f64]>,
    relu: bool,
    dcfg: &DatapathConfig,
    reverse_schedule: bool,
) -> Result<Tensor> {
    dcfg.validate()?;
    if weights.shape.len() != 4 || acts.shape.len() != 3 {
        return Err(VsqError::ShapeMismatch(
            "expected 4-D weights and 3-D activations".to_string(),
        ));
    }
    if weights.bits != dcfg.n_w || acts.bits != dcfg.n_a {
        return Err(VsqError::InvalidArgument(
            "operand bitwidths do not match the datapath config".to_string(),
        ));
    }
    let (k_out, h_out, w_out) = conv_output_dims(&acts.shape, &weights.shape, stride, padding)?;
    let (c, h, w) = (acts.shape[0], acts.shape[1], acts.shape[2]);
    let (r_dim, s_dim) = (weights.shape[2], weights.shape[3]);
    let v = dcfg.v;
    let chan_vecs = c.div_ceil(v);

    let w_scales = OperandScales::build(weights, dcfg.m_w, v, "weights")?;
    let a_scales = OperandScales::build(acts, dcfg.m_a, v, "activations")?;

    let w_layout = ChannelLayout::of(&weights.shape);
    let a_layout = ChannelLayout::of(&acts.shape);

    let mut out = vec![0.0f32; k_out * h_out * w_out];
    let mut w_vec = vec![0i32; v];
    let mut a_vec = vec![0i32; v];
    for k in 0..k_out {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut collector = Collector::new(dcfg);
                let mut taps: Vec<(usize, usize, usize)> = Vec::new();
                for r in 0..r_dim {
                    for s in 0..s_dim {
                        for cv in 0..chan_vecs {
                            taps.push((r, s, cv));
                        }
                    }
                }
                if reverse_schedule {
                    taps.reverse();
                }
                for (r, s, cv) in taps {
                    let iy = (oy * stride + r) as isize - padding as isize;
                    let ix = (ox * stride + s) as isize - padding as isize;
                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                        continue; // zero-padded spatial position, contributes nothing
                    }
                    let (iy, ix) = (iy as usize, ix as usize);
                    for j in 0..v {
                        let ci = cv * v + j;
                        if ci >= c {
                            w_vec[j] = 0;
                            a_vec[j] = 0;
                        } else {
                            w_vec[j] =
                                weights.int_data[w_layout.offset(k, ci, r * s_dim + s)];
                            a_vec[j] = acts.int_data[a_layout.offset(0, ci, iy * w + ix)];
                        }
                    }
                    let s_qw = w_scales.s_q(k, cv, r * s_dim + s);
                    let s_qa = a_scales.s_q(0, cv, iy * w + ix);
                    let ps = datapath::vector_mac(&w_vec, &a_vec, s_qw, s_qa, dcfg)?;
                    collector.accumulate(ps)?;
                }
                let y = datapath::ppu_finalize(
                    collector.value(),
                    w_scales.gamma(k),
                    a_scales.gamma(0),
                    collector.exponent_comp(),
                    bias.map(|b| b[k]),
                    relu,
                );
                out[(k * h_out + oy) * w_out + ox] = y as f32;
            }
        }
    }
    Tensor::new(vec![k_out, h_out, w_out], out)
}

/// Quantized linear layer: conv semantics with R = S = H = W = 1.
pub fn linear_quantized(
    acts: &QuantizedTensor,
    weights: &QuantizedTensor,
    bias: Option<&[f64]>,
    relu: bool,
    dcfg: &DatapathConfig,
) -> Result<Tensor> {
    let out = conv2d_quantized(acts, weights, 1, 0, bias, relu, dcfg)?;
    let k = out.shape()[0];
    Tensor::new(vec![k], out.data().to_vec())
}

/// Scaling configuration of a network run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Reference,
    /// Coarse per-layer scaling on both operands.
    PerLayer,
    /// Per-channel weights, per-layer activations (the POC baseline).
    PerChannel,
    /// Floating-point per-vector scales on both operands (simulated).
    PerVectorSingle,
    /// Two-level integer per-vector scales on both operands (PVAW).
    PerVectorTwoLevel,
    /// Per-vector activations only; per-channel weights.
    Pvao,
    /// Per-vector weights only; per-layer activations.
    Pvwo,
}

impl RunMode {
    pub const ALL: [RunMode; 7] = [
        RunMode::Reference,
        RunMode::PerLayer,
        RunMode::PerChannel,
        RunMode::PerVectorSingle,
        RunMode::PerVectorTwoLevel,
        RunMode::Pvao,
        RunMode::Pvwo,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "reference" => RunMode::Reference,
            "per-layer" => RunMode::PerLayer,
            "per-channel" | "poc" => RunMode::PerChannel,
            "pv-single" => RunMode::PerVectorSingle,
            "pv-two-level" | "pvaw" => RunMode::PerVectorTwoLevel,
            "pvao" => RunMode::Pvao,
            "pvwo" => RunMode::Pvwo,
            _ => {
                return Err(VsqError::InvalidArgument(format!(
                    "unknown mode {s:?} (expected reference, per-layer, per-channel/poc, \
                     pv-single, pv-two-level/pvaw, pvao, pvwo)"
                )))
            }
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            RunMode::Reference => "reference",
            RunMode::PerLayer => "per-layer",
            RunMode::PerChannel => "per-channel",
            RunMode::PerVectorSingle => "pv-single",
            RunMode::PerVectorTwoLevel => "pvaw",
            RunMode::Pvao => "pvao",
            RunMode::Pvwo => "pvwo",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct OperandPlan {
    granularity: Granularity,
    two_level: bool,
    width: ScaleWidth,
}

fn plans(mode: RunMode, cfg: &QuantConfig) -> (OperandPlan, OperandPlan) {
    let coarse_w = |g| OperandPlan {
        granularity: g,
        two_level: false,
        width: ScaleWidth::Coarse,
    };
    let pv = |m, v| OperandPlan {
        granularity: Granularity::PerVector { v },
        two_level: true,
        width: ScaleWidth::Bits(m),
    };
    match mode {
        RunMode::Reference | RunMode::PerVectorSingle => {
            // per-vector single-level runs the simulated path; plans unused
            // for Reference
            let g = Granularity::PerVector { v: cfg.v };
            let p = OperandPlan {
                granularity: g,
                two_level: false,
                width: ScaleWidth::Coarse,
            };
            (p, p)
        }
        RunMode::PerLayer => (
            coarse_w(Granularity::PerLayer),
            coarse_w(Granularity::PerLayer),
        ),
        RunMode::PerChannel => (
            coarse_w(Granularity::PerChannel),
            coarse_w(Granularity::PerLayer),
        ),
        RunMode::PerVectorTwoLevel => (pv(cfg.m_w, cfg.v), pv(cfg.m_a, cfg.v)),
        RunMode::Pvao => (coarse_w(Granularity::PerChannel), pv(cfg.m_a, cfg.v)),
        RunMode::Pvwo => (pv(cfg.m_w, cfg.v), coarse_w(Granularity::PerLayer)),
    }
}

/// Per-layer reconstruction-error metrics against the reference run.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorRow {
    pub layer: String,
    pub mode: String,
    pub v: usize,
    pub n_w: u8,
    pub n_a: u8,
    pub m_w: u8,
    pub m_a: u8,
    pub mse: f64,
    pub sqnr_db: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ErrorReport {
    pub rows: Vec<ErrorRow>,
}

impl ErrorReport {
    pub const CSV_HEADER: &'static str = "layer,mode,V,N_w,N_a,M_w,M_a,mse,sqnr_db,max_abs_err";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.layer, r.mode, r.v, r.n_w, r.n_a, r.m_w, r.m_a, r.mse, r.sqnr_db, r.max_abs_err
            ));
        }
        out
    }
}

/// Signal-to-quantization-noise ratio in dB between a reference tensor and a
/// quantized result. Infinite when the error power is zero.
pub fn sqnr_db(reference: &[f32], quantized: &[f32]) -> f64 {
    let signal: f64 = reference.iter().map(|&x| (x as f64) * (x as f64)).sum();
    let noise: f64 = reference
        .iter()
        .zip(quantized)
        .map(|(&a, &b)| {
            let e = a as f64 - b as f64;
            e * e
        })
        .sum();
    if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / noise).log10()
    }
}

fn error_metrics(reference: &Tensor, quantized: &Tensor) -> (f64, f64, f64) {
    let mse: f64 = reference
        .data()
        .iter()
        .zip(quantized.data())
        .map(|(&a, &b)| {
            let e = a as f64 - b as f64;
            e * e
        })
        .sum::<f64>()
        / reference.len() as f64;
    let max_abs = reference
        .data()
        .iter()
        .zip(quantized.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .fold(0.0f64, f64::max);
    (mse, sqnr_db(reference.data(), quantized.data()), max_abs)
}

fn quantize_for_plan(
    t: &Tensor,
    plan: &OperandPlan,
    cfg: &QuantConfig,
    op: Operand,
) -> Result<QuantizedTensor> {
    let alphas = calibration::calibrate(t, plan.granularity, CalibMethod::Max)?;
    let bits = cfg.bits(op);
    let signed = cfg.signed(op);
    if plan.two_level {
        let v = match plan.granularity {
            Granularity::PerVector { v } => v,
            _ => unreachable!(),
        };
        quant::quantize_two_level(
            t,
            bits,
            signed,
            cfg.unsigned_full_range,
            cfg.scale_bits(op),
            v,
            &alphas,
            cfg.rounding,
        )
    } else {
        quant::quantize_single(
            t,
            bits,
            signed,
            cfg.unsigned_full_range,
            plan.granularity,
            &alphas,
            cfg.rounding,
        )
    }
}

/// Execute the network layer by layer in the given mode, reporting per-layer
/// error metrics against the reference run on the same input.
pub fn run_network(
    net: &Network,
    input: &Tensor,
    mode: RunMode,
    cfg: &QuantConfig,
    scale_product_bits: Option<u8>,
) -> Result<(Tensor, ErrorReport)> {
    let mut report = ErrorReport::default();
    let mut reference = to_conv_activations(input)?;
    let mut current = reference.clone();

    for layer in &net.layers {
        let ref_out = conv2d_reference(
            &reference,
            &layer.weights,
            layer.stride,
            layer.padding,
            layer.bias.as_deref(),
            layer.relu,
        )?;

        let out = match mode {
            RunMode::Reference => conv2d_reference(
                &current,
                &layer.weights,
                layer.stride,
                layer.padding,
                layer.bias.as_deref(),
                layer.relu,
            )?,
            RunMode::PerVectorSingle => {
                // simulated quantization: fp per-vector scales on both
                // operands, executed in real arithmetic
                let g = Granularity::PerVector { v: cfg.v };
                let w_alphas =
                    calibration::calibrate(&layer.weights, g, CalibMethod::Max)?;
                let w_q = quant::quantize_single(
                    &layer.weights,
                    cfg.n_w,
                    cfg.signed_w,
                    cfg.unsigned_full_range,
                    g,
                    &w_alphas,
                    cfg.rounding,
                )?;
                let a_q = datapath::ppu_requantize(
                    &current,
                    cfg.n_a,
                    cfg.m_a,
                    cfg.v,
                    cfg.signed_a,
                    cfg.unsigned_full_range,
                    ScaleMode::SingleLevel,
                    cfg.rounding,
                )?;
                conv2d_reference(
                    &a_q.reconstruct(),
                    &w_q.reconstruct(),
                    layer.stride,
                    layer.padding,
                    layer.bias.as_deref(),
                    layer.relu,
                )?
            }
            _ => {
                let (w_plan, a_plan) = plans(mode, cfg);
                let w_q =
                    quantize_for_plan(&layer.weights, &w_plan, cfg, Operand::Weights)?;
                let a_q = quantize_for_plan(&current, &a_plan, cfg, Operand::Activations)?;
                let dcfg = DatapathConfig {
                    n_w: cfg.n_w,
                    n_a: cfg.n_a,
                    m_w: w_plan.width,
                    m_a: a_plan.width,
                    v: cfg.v,
                    scale_product_bits,
                    accum_guard_bits: 12,
                };
                conv2d_quantized(
                    &a_q,
                    &w_q,
                    layer.stride,
                    layer.padding,
                    layer.bias.as_deref(),
                    layer.relu,
                    &dcfg,
                )?
            }
        };

        let (mse, sqnr, max_abs) = error_metrics(&ref_out, &out);
        report.rows.push(ErrorRow {
            layer: layer.name.clone(),
            mode: mode.label().to_string(),
            v: cfg.v,
            n_w: cfg.n_w,
            n_a: cfg.n_a,
            m_w: cfg.m_w,
            m_a: cfg.m_a,
            mse,
            sqnr_db: sqnr,
            max_abs_err: max_abs,
        });
        reference = ref_out;
        current = out;
    }
    Ok((current, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;

    #[test]
    fn identity_conv_passthrough() {
        let input = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let weights = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv2d_reference(&input, &weights, 1, 0, None, false).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn all_ones_2x2_valid() {
        let input = Tensor::new(vec![1, 2, 2], vec![1.0; 4]).unwrap();
        let weights = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let out = conv2d_reference(&input, &weights, 1, 0, None, false).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn reference_matches_naive_loop_oracle() {
        // integer-valued fixture so both loop orders are exact
        let input = fixture::seeded_int_tensor(&[3, 5, 5], 7, 4).unwrap();
        let weights = fixture::seeded_int_tensor(&[2, 3, 3, 3], 8, 4).unwrap();
        let out = conv2d_reference(&input, &weights, 1, 1, None, false).unwrap();
        // independent naive implementation with a different loop nesting
        let (k_out, h_out, w_out) = (2usize, 5usize, 5usize);
        for k in 0..k_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = 0.0f64;
                    for r in 0..3 {
                        for s in 0..3 {
                            for ci in 0..3 {
                                let iy = oy as isize + r as isize - 1;
                                let ix = ox as isize + s as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                                    continue;
                                }
                                acc += weights.data()[((k * 3 + ci) * 3 + r) * 3 + s] as f64
                                    * input.data()[(ci * 5 + iy as usize) * 5 + ix as usize]
                                        as f64;
                            }
                        }
                    }
                    assert_eq!(out.data()[(k * h_out + oy) * w_out + ox], acc as f32);
                }
            }
        }
    }

    #[test]
    fn reference_linear_on_integer_fixtures() {
        // conv(a+b) == conv(a) + conv(b) exactly on integer fixtures
        let a = fixture::seeded_int_tensor(&[2, 4, 4], 1, 3).unwrap();
        let b = fixture::seeded_int_tensor(&[2, 4, 4], 2, 3).unwrap();
        let sum = Tensor::new(
            vec![2, 4, 4],
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let w = fixture::seeded_int_tensor(&[3, 2, 3, 3], 3, 3).unwrap();
        let ca = conv2d_reference(&a, &w, 1, 1, None, false).unwrap();
        let cb = conv2d_reference(&b, &w, 1, 1, None, false).unwrap();
        let cs = conv2d_reference(&sum, &w, 1, 1, None, false).unwrap();
        for ((x, y), z) in ca.data().iter().zip(cb.data()).zip(cs.data()) {
            assert_eq!(x + y, *z);
        }
    }

    #[test]
    fn linear_identity_passthrough() {
        let input = Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let out = linear_reference(&input, &eye, None, false).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let input = Tensor::new(vec![2, 2, 2], vec![0.0; 8]).unwrap();
        let weights = Tensor::new(vec![1, 3, 1, 1], vec![0.0; 3]).unwrap();
        assert!(matches!(
            conv2d_reference(&input, &weights, 1, 0, None, false),
            Err(VsqError::ShapeMismatch(_))
        ));
    }

    fn quantize_max_pv(t: &Tensor, bits: u8, m: u8, v: usize) -> QuantizedTensor {
        let g = Granularity::PerVector { v };
        let alphas = calibration::calibrate(t, g, CalibMethod::Max).unwrap();
        quant::quantize_two_level(
            t,
            bits,
            true,
            false,
            m,
            v,
            &alphas,
            quant::Rounding::HalfAwayFromZero,
        )
        .unwrap()
    }

    fn pvaw_dcfg(n: u8, m: u8, v: usize) -> DatapathConfig {
        DatapathConfig {
            n_w: n,
            n_a: n,
            m_w: ScaleWidth::Bits(m),
            m_a: ScaleWidth::Bits(m),
            v,
            scale_product_bits: None,
            accum_guard_bits: 12,
        }
    }

    #[test]
    fn quantized_identity_conv_with_unit_scales() {
        // integer-valued input quantizes losslessly; identity conv passes it through
        let input = fixture::seeded_int_tensor(&[4, 2, 2], 5, 7).unwrap();
        let mut eye = vec![0.0f32; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let weights = Tensor::new(vec![4, 4, 1, 1], eye).unwrap();
        let a_q = quantize_max_pv(&input, 4, 4, 4);
        let w_q = quantize_max_pv(&weights, 4, 4, 4);
        let out = conv2d_quantized(&a_q, &w_q, 1, 0, None, false, &pvaw_dcfg(4, 4, 4)).unwrap();
        let expected = conv2d_reference(&a_q.reconstruct(), &w_q.reconstruct(), 1, 0, None, false)
            .unwrap();
        assert_eq!(out.data(), expected.data());
    }

    #[test]
    fn quantized_error_within_propagated_bound() {
        let input = fixture::seeded_tensor(&[6, 4, 4], 11, 2.0).unwrap();
        let weights = fixture::seeded_tensor(&[3, 6, 3, 3], 12, 1.0).unwrap();
        let (n, m, v) = (6u8, 10u8, 4usize);
        let a_q = quantize_max_pv(&input, n, m, v);
        let w_q = quantize_max_pv(&weights, n, m, v);
        let out = conv2d_quantized(&a_q, &w_q, 1, 1, None, false, &pvaw_dcfg(n, m, v)).unwrap();
        let reference = conv2d_reference(&input, &weights, 1, 1, None, false).unwrap();

        // interval-arithmetic oracle: per-element reconstruction error bounds
        // |w - w_q*s_eff| <= s/2 + qmax*gamma/2, summed over contributions
        let qmax = ((1i32 << (n - 1)) - 1) as f64;
        let w_err = |grp: usize| -> f64 {
            let s = w_q.scales.per_group_fp[grp];
            s / 2.0 + qmax * w_q.scales.coarse_fp[w_q.coarse_of_group(grp)] / 2.0
        };
        let a_err = |grp: usize| -> f64 {
            let s = a_q.scales.per_group_fp[grp];
            s / 2.0 + qmax * a_q.scales.coarse_fp[a_q.coarse_of_group(grp)] / 2.0
        };
        let w_vz = Vectorization::new(ChannelLayout::of(weights.shape()), v).unwrap();
        let a_vz = Vectorization::new(ChannelLayout::of(input.shape()), v).unwrap();
        for k in 0..3usize {
            for oy in 0..4usize {
                for ox in 0..4usize {
                    let mut bound = 1e-9;
                    for ci in 0..6usize {
                        for r in 0..3usize {
                            for s in 0..3usize {
                                let iy = oy as isize + r as isize - 1;
                                let ix = ox as isize + s as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 4 || ix >= 4 {
                                    continue;
                                }
                                let w_flat = ((k * 6 + ci) * 3 + r) * 3 + s;
                                let a_flat = (ci * 4 + iy as usize) * 4 + ix as usize;
                                let (wk, wi, _) = w_vz.locate(w_flat);
                                let (ak, ai, _) = a_vz.locate(a_flat);
                                let ew = w_err(w_vz.flat_vector(wk, wi));
                                let ea = a_err(a_vz.flat_vector(ak, ai));
                                let wv = weights.data()[w_flat].abs() as f64;
                                let av = input.data()[a_flat].abs() as f64;
                                bound += av * ew + wv * ea + ew * ea;
                            }
                        }
                    }
                    let flat = (k * 4 + oy) * 4 + ox;
                    let err = (out.data()[flat] as f64 - reference.data()[flat] as f64).abs();
                    assert!(err <= bound, "err {err} > bound {bound} at {flat}");
                }
            }
        }
    }

    #[test]
    fn quantized_schedule_order_invariant() {
        let input = fixture::seeded_tensor(&[5, 3, 3], 21, 1.0).unwrap();
        let weights = fixture::seeded_tensor(&[2, 5, 3, 3], 22, 1.0).unwrap();
        let a_q = quantize_max_pv(&input, 4, 4, 2);
        let w_q = quantize_max_pv(&weights, 4, 4, 2);
        let dcfg = pvaw_dcfg(4, 4, 2);
        let fwd =
            conv2d_quantized_impl(&a_q, &w_q, 1, 1, None, false, &dcfg, false).unwrap();
        let rev = conv2d_quantized_impl(&a_q, &w_q, 1, 1, None, false, &dcfg, true).unwrap();
        let fwd_bits: Vec<u32> = fwd.data().iter().map(|x| x.to_bits()).collect();
        let rev_bits: Vec<u32> = rev.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(fwd_bits, rev_bits);
    }

    #[test]
    fn linear_quantized_single_vector_is_one_mac() {
        let input = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 4.0]).unwrap();
        let weights = Tensor::new(vec![1, 4], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let a_q = quantize_max_pv(&crate::nn::to_conv_activations(&input).unwrap(), 4, 4, 4);
        let w_q = quantize_max_pv(&to_conv_weights(&weights).unwrap(), 4, 4, 4);
        let dcfg = pvaw_dcfg(4, 4, 4);
        let out = linear_quantized(&a_q, &w_q, None, false, &dcfg).unwrap();

        let ps = datapath::vector_mac(
            &a_q.int_data,
            &w_q.int_data,
            a_q.scales.per_vector_int[0],
            w_q.scales.per_vector_int[0],
            &dcfg,
        )
        .unwrap();
        let expected = datapath::ppu_finalize(
            ps.value,
            w_q.scales.coarse_fp[0],
            a_q.scales.coarse_fp[0],
            ps.exponent_comp,
            None,
            false,
        );
        assert_eq!(out.data()[0], expected as f32);
    }

    #[test]
    fn run_network_reference_zero_error() {
        let (net, input) = fixture::fixture_network(42);
        let cfg = QuantConfig::default();
        let (_, report) =
            run_network(&net, &input, RunMode::Reference, &cfg, None).unwrap();
        for row in &report.rows {
            assert_eq!(row.mse, 0.0);
            assert!(row.sqnr_db.is_infinite());
        }
    }

    #[test]
    fn run_network_mode_ordering() {
        let (net, input) = fixture::fixture_network(42);
        let cfg = QuantConfig::default();
        let sqnr = |mode| {
            let (_, report) = run_network(&net, &input, mode, &cfg, None).unwrap();
            report.rows.last().unwrap().sqnr_db
        };
        let per_layer = sqnr(RunMode::PerLayer);
        let per_channel = sqnr(RunMode::PerChannel);
        let pv_single = sqnr(RunMode::PerVectorSingle);
        assert!(
            pv_single > per_channel && per_channel > per_layer,
            "SQNR ordering violated: pv {pv_single}, pc {per_channel}, pl {per_layer}"
        );
        let pvaw = sqnr(RunMode::PerVectorTwoLevel);
        let pvwo = sqnr(RunMode::Pvwo);
        let poc = sqnr(RunMode::PerChannel);
        assert!(
            pvaw >= pvwo && pvwo >= poc,
            "PVAW {pvaw} >= PVWO {pvwo} >= POC {poc} violated"
        );
    }

    #[test]
    fn max_bitwidths_v1_converges_to_reference() {
        let (net, input) = fixture::fixture_network(42);
        let cfg = QuantConfig {
            n_w: 8,
            n_a: 8,
            m_w: 10,
            m_a: 10,
            v: 1,
            granularity_w: Granularity::PerVector { v: 1 },
            granularity_a: Granularity::PerVector { v: 1 },
            ..QuantConfig::default()
        };
        let (_, report) =
            run_network(&net, &input, RunMode::PerVectorTwoLevel, &cfg, None).unwrap();
        for row in &report.rows {
            // sqnr_db > 30 dB means relative output MSE below 1e-3
            assert!(row.sqnr_db > 30.0, "{}: {}", row.layer, row.sqnr_db);
        }
    }

    #[test]
    fn network_spec_round_trip() {
        let json = r#"{
            "input_shape": [4, 6, 6],
            "seed": 7,
            "layers": [
                {"kind": "conv2d", "out_channels": 8, "in_channels": 4,
                 "kernel_h": 3, "kernel_w": 3, "padding": 1, "relu": true},
                {"kind": "linear", "in_features": 8, "out_features": 2}
            ]
        }"#;
        let spec = NetworkSpec::parse(json).unwrap();
        assert_eq!(spec.layers.len(), 2);
        let net = spec.resolve(Path::new(".")).unwrap();
        assert_eq!(net.layers[0].weights.shape(), &[8, 4, 3, 3]);
        assert_eq!(net.layers[1].weights.shape(), &[2, 8, 1, 1]);
        // strict parsing rejects unknown keys
        assert!(NetworkSpec::parse(&json.replace("\"seed\": 7", "\"sed\": 7")).is_err());
    }
}
