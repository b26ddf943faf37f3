//! Shared acceptance-test helpers: an independent double-precision oracle for
//! the two-level per-vector scaling algorithm, and pass/fail reporting.
//!
//! The oracle is written directly from the algebra (abs-max,
//! scale, integer codes, coarse factorization) and deliberately shares no code
//! with the library under test.

use std::panic::{catch_unwind, AssertUnwindSafe};

/// Independent two-level quantization of one coarse group of vectors.
///
/// Returns (per-vector fp scales s, coarse gamma, integer s_q codes,
/// reconstructed values per vector).
pub struct TwoLevelOracle {
    pub s: Vec<f64>,
    pub gamma: f64,
    pub s_q: Vec<u32>,
    pub x_q: Vec<Vec<i64>>,
    pub reconstructed: Vec<Vec<f64>>,
}

pub fn two_level_oracle(vectors: &[Vec<f64>], n: u8, m: u8) -> TwoLevelOracle {
    let q_max = (1i64 << (n - 1)) - 1;
    // abs-max and per-vector scale
    let x_max: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().fold(0.0f64, |acc, x| acc.max(x.abs())))
        .collect();
    let s: Vec<f64> = x_max.iter().map(|&xm| xm / q_max as f64).collect();
    // integer codes from the full-precision per-vector scale
    let x_q: Vec<Vec<i64>> = vectors
        .iter()
        .zip(&s)
        .map(|(v, &sv)| {
            v.iter()
                .map(|&x| {
                    if sv == 0.0 {
                        0
                    } else {
                        let q = half_away(x / sv);
                        q.max(-q_max).min(q_max)
                    }
                })
                .collect()
        })
        .collect();
    // coarse factorization
    let s_max = s.iter().fold(0.0f64, |acc, &x| acc.max(x));
    let scale_cap = ((1u64 << m) - 1) as f64;
    let gamma = s_max / scale_cap;
    let s_q: Vec<u32> = s
        .iter()
        .map(|&sv| {
            if gamma == 0.0 {
                0
            } else {
                half_away(sv / gamma).clamp(0, scale_cap as i64) as u32
            }
        })
        .collect();
    let reconstructed: Vec<Vec<f64>> = x_q
        .iter()
        .zip(&s_q)
        .map(|(v, &sq)| v.iter().map(|&q| q as f64 * sq as f64 * gamma).collect())
        .collect();
    TwoLevelOracle {
        s,
        gamma,
        s_q,
        x_q,
        reconstructed,
    }
}

fn half_away(x: f64) -> i64 {
    if x >= 0.0 {
        (x + 0.5).floor() as i64
    } else {
        (x - 0.5).ceil() as i64
    }
}

/// Run one acceptance criterion, printing a single pass/fail line.
pub fn criterion(number: usize, name: &str, body: impl FnOnce()) {
    let result = catch_unwind(AssertUnwindSafe(body));
    match &result {
        Ok(()) => println!("[PASS] criterion {number}: {name}"),
        Err(_) => println!("[FAIL] criterion {number}: {name}"),
    }
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}
