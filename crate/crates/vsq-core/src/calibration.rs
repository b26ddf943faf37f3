//! Clipping-range selection (alpha) per scaling group.
//!
//! Supports per-layer, per-channel, and per-vector grouping with max,
//! percentile, entropy (KL-divergence), and MSE calibration. Weights calibrate
//! statically from the trained tensor; activations route through the same
//! functions, either dynamically per inference or statically from a
//! representative batch tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VsqError};
use crate::quant::{self, Rounding};
use crate::tensor::{Tensor, Vectorization};

pub const DEFAULT_HISTOGRAM_BINS: usize = 2048;
const MSE_GRID_POINTS: usize = 128;
const KL_SMOOTHING_EPS: f64 = 1e-12;

/// Scaling-group granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerLayer,
    PerChannel,
    PerVector { v: usize },
}

impl Granularity {
    pub fn validate(&self) -> Result<()> {
        if let Granularity::PerVector { v } = self {
            if *v == 0 {
                return Err(VsqError::InvalidArgument(
                    "per-vector granularity requires V >= 1".to_string(),
                ));
            }
        }
        Ok(())
    }
}

/// Calibration method selecting alpha for each group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibMethod {
    /// Maximum absolute value.
    Max,
    /// Linear-interpolated percentile of |x| at fraction q in (0, 1].
    Percentile { q: f64 },
    /// KL-divergence minimization between reference and quantized
    /// distributions at the given element bitwidth.
    Entropy { bits: u8 },
    /// Mean-squared-error minimization over a fixed candidate grid at the
    /// given element bitwidth.
    Mse { bits: u8 },
}

impl CalibMethod {
    pub fn validate(&self) -> Result<()> {
        match self {
            CalibMethod::Percentile { q } if !(*q > 0.0 && *q <= 1.0) => Err(
                VsqError::InvalidArgument(format!("percentile q must be in (0,1], got {q}")),
            ),
            CalibMethod::Entropy { bits } | CalibMethod::Mse { bits } if *bits < 2 => Err(
                VsqError::InvalidArgument("calibration bitwidth must be >= 2".to_string()),
            ),
            _ => Ok(()),
        }
    }
}

/// One clipping range per scaling group, indexed consistently with
/// [`crate::tensor::vectorize`] ((k, i) row-major for per-vector groups).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSet {
    pub granularity: Granularity,
    pub method: CalibMethod,
    pub alphas: Vec<f64>,
}

/// Non-padded element values of every scaling group, in group order.
pub fn group_values(t: &Tensor, g: Granularity) -> Result<Vec<Vec<f32>>> {
    g.validate()?;
    match g {
        Granularity::PerLayer => Ok(vec![t.data().to_vec()]),
        Granularity::PerChannel => {
            let dim0 = t.shape()[0];
            let chunk = t.len() / dim0;
            Ok(t.data().chunks(chunk).map(|c| c.to_vec()).collect())
        }
        Granularity::PerVector { v } => {
            let views = crate::tensor::vectorize(t, v)?;
            Ok(views
                .iter()
                .map(|w| (0..v - w.pad_count).map(|j| w.get(j)).collect())
                .collect())
        }
    }
}

/// Scaling-group index of a flat element index under granularity `g`.
pub fn group_of_element(t: &Tensor, g: Granularity, flat: usize) -> Result<usize> {
    match g {
        Granularity::PerLayer => Ok(0),
        Granularity::PerChannel => {
            let dim0 = t.shape()[0];
            Ok(flat / (t.len() / dim0))
        }
        Granularity::PerVector { v } => {
            let vz = Vectorization::new(t.layout(), v)?;
            let (k, i, _) = vz.locate(flat);
            Ok(vz.flat_vector(k, i))
        }
    }
}

/// Select alpha for every scaling group of `t`.
pub fn calibrate(t: &Tensor, g: Granularity, m: CalibMethod) -> Result<AlphaSet> {
    m.validate()?;
    let groups = group_values(t, g)?;
    let mut alphas = Vec::with_capacity(groups.len());
    for group in &groups {
        if group.is_empty() {
            return Err(VsqError::InvalidArgument(
                "empty scaling group".to_string(),
            ));
        }
        let alpha = match m {
            CalibMethod::Max => abs_max(group),
            CalibMethod::Percentile { q } => percentile(group, q),
            CalibMethod::Entropy { bits } => {
                let hist = build_histogram(group, DEFAULT_HISTOGRAM_BINS)?;
                calibrate_entropy(&hist, bits)
            }
            CalibMethod::Mse { bits } => calibrate_mse(group, bits),
        };
        alphas.push(alpha);
    }
    Ok(AlphaSet {
        granularity: g,
        method: m,
        alphas,
    })
}

fn abs_max(values: &[f32]) -> f64 {
    values.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs()))
}

/// |x| percentile via sort + linear interpolation at rank q*(n-1).
/// q = 1.0 returns the exact maximum.
fn percentile(values: &[f32], q: f64) -> f64 {
    let mut mags: Vec<f64> = values.iter().map(|&x| (x as f64).abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q * (mags.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        mags[lo]
    } else {
        let frac = rank - lo as f64;
        mags[lo] * (1.0 - frac) + mags[hi] * frac
    }
}

/// Histogram of |x| over [0, abs-max]; a value exactly on a bin boundary goes
/// to the higher bin, top edge inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub abs_max: f64,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        self.abs_max / self.counts.len() as f64
    }
}

pub fn build_histogram(values: &[f32], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(VsqError::InvalidArgument("bins must be >= 1".to_string()));
    }
    let amax = abs_max(values);
    let mut counts = vec![0u64; bins];
    if amax == 0.0 {
        counts[0] = values.len() as u64;
        return Ok(Histogram {
            counts,
            abs_max: 0.0,
        });
    }
    for &x in values {
        let mag = (x as f64).abs();
        let bin = ((mag / amax * bins as f64) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    Ok(Histogram {
        counts,
        abs_max: amax,
    })
}

/// Entropy (KL-divergence) calibration.
///
/// Candidate thresholds are the upper bin edges from bin 2^(N-1)-1 upward.
/// For each candidate, mass above the threshold is folded into the last
/// retained bin, the retained bins are merged into 2^(N-1)-1 quantization
/// levels, and each level's mass is spread uniformly over the originally
/// occupied bins it covers. Returns the candidate minimizing
/// KL(reference || quantized-then-expanded); ties resolve to the smallest
/// alpha.
pub fn calibrate_entropy(hist: &Histogram, bits: u8) -> f64 {
    let bins = hist.counts.len();
    let levels = (1usize << (bits - 1)) - 1;
    if hist.abs_max == 0.0 || bins <= levels || levels == 0 {
        return hist.abs_max;
    }
    // Degenerate: all mass at or below the first candidate edge.
    let occupied = hist.counts.iter().filter(|&&c| c > 0).count();
    if occupied <= 1 {
        return hist.abs_max;
    }

    let width = hist.bin_width();
    let mut best_kl = f64::INFINITY;
    let mut best_alpha = hist.abs_max;
    for retained in levels..=bins {
        // Reference distribution: first `retained` bins, clipped mass folded
        // into the last retained bin.
        let mut reference: Vec<f64> = hist.counts[..retained].iter().map(|&c| c as f64).collect();
        let clipped: u64 = hist.counts[retained..].iter().sum();
        reference[retained - 1] += clipped as f64;

        // Quantize: merge `retained` bins into `levels` groups, then expand
        // each group's mass uniformly over its occupied bins.
        let mut expanded = vec![0.0f64; retained];
        for level in 0..levels {
            let start = level * retained / levels;
            let end = (level + 1) * retained / levels;
            let mass: f64 = reference[start..end].iter().sum();
            let occupied = reference[start..end].iter().filter(|&&p| p > 0.0).count();
            if occupied > 0 {
                let share = mass / occupied as f64;
                for b in start..end {
                    if reference[b] > 0.0 {
                        expanded[b] = share;
                    }
                }
            }
        }

        let ref_total: f64 = reference.iter().sum();
        let exp_total: f64 = expanded.iter().sum();
        let mut kl = 0.0;
        for b in 0..retained {
            let p = reference[b] / ref_total;
            if p > 0.0 {
                let q = (expanded[b] / exp_total).max(KL_SMOOTHING_EPS);
                kl += p * (p / q).ln();
            }
        }

        if kl < best_kl {
            best_kl = kl;
            best_alpha = retained as f64 * width;
        }
    }
    best_alpha.min(hist.abs_max)
}

/// MSE calibration: evaluate symmetric N-bit quantization error over a fixed
/// grid of 128 linearly spaced alpha candidates in [abs-max/128, abs-max] and
/// return the first grid minimum.
pub fn calibrate_mse(values: &[f32], bits: u8) -> f64 {
    let amax = abs_max(values);
    if amax == 0.0 {
        return 0.0;
    }
    let mut best = (f64::INFINITY, amax);
    for step in 1..=MSE_GRID_POINTS {
        let alpha = amax * step as f64 / MSE_GRID_POINTS as f64;
        let err = quantization_mse(values, alpha, bits);
        if err < best.0 {
            best = (err, alpha);
        }
    }
    best.1
}

fn quantization_mse(values: &[f32], alpha: f64, bits: u8) -> f64 {
    let s = quant::compute_scale(alpha, bits);
    let mut total = 0.0;
    for &x in values {
        let q = quant::quantize_value(x as f64, s, bits, true, Rounding::HalfAwayFromZero)
            .expect("positive scale");
        let e = x as f64 - s * q as f64;
        total += e * e;
    }
    total / values.len() as f64
}
