//! Randomized property tests over the quantization and I/O invariants.

use proptest::prelude::*;

use vsq_core::calibration::{self, CalibMethod, Granularity};
use vsq_core::quant::{self, Rounding};
use vsq_core::tensor::{Tensor, Vectorization};

fn finite_values(max_len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1e4f32..1e4, 1..=max_len)
}

proptest! {
    #[test]
    fn vst_round_trip_bit_exact(values in finite_values(64)) {
        let t = Tensor::new(vec![values.len()], values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vst");
        t.save(&path).unwrap();
        let back = Tensor::load(&path).unwrap();
        let a: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn max_calibrated_error_within_half_scale(
        values in finite_values(64),
        n in prop::sample::select(vec![3u8, 4, 6, 8]),
        v in prop::sample::select(vec![1usize, 2, 4, 8, 16]),
    ) {
        let t = Tensor::new(vec![values.len()], values).unwrap();
        let g = Granularity::PerVector { v };
        let alphas = calibration::calibrate(&t, g, CalibMethod::Max).unwrap();
        let qt = quant::quantize_single(
            &t, n, true, false, g, &alphas, Rounding::HalfAwayFromZero,
        ).unwrap();
        let back = qt.reconstruct();
        let vz = Vectorization::new(t.layout(), v).unwrap();
        for (flat, (&x, &y)) in t.data().iter().zip(back.data()).enumerate() {
            let (k, i, _) = vz.locate(flat);
            let grp = vz.flat_vector(k, i);
            let s = qt.scales.per_group_fp[grp];
            let eps = 4.0 * f32::EPSILON as f64 * alphas.alphas[grp];
            prop_assert!((x as f64 - y as f64).abs() <= s / 2.0 + eps);
        }
    }

    #[test]
    fn two_level_scale_fidelity(
        values in finite_values(64),
        m in prop::sample::select(vec![3u8, 4, 6, 8, 10]),
    ) {
        let t = Tensor::new(vec![values.len()], values).unwrap();
        let g = Granularity::PerVector { v: 4 };
        let alphas = calibration::calibrate(&t, g, CalibMethod::Max).unwrap();
        let qt = quant::quantize_two_level(
            &t, 4, true, false, m, 4, &alphas, Rounding::HalfAwayFromZero,
        ).unwrap();
        for (grp, &s) in qt.scales.per_group_fp.iter().enumerate() {
            let gamma = qt.scales.coarse_fp[qt.coarse_of_group(grp)];
            let sq = qt.scales.per_vector_int[grp] as f64;
            prop_assert!((sq * gamma - s).abs() <= gamma / 2.0 + 1e-15 * s.abs().max(1.0));
        }
    }

    #[test]
    fn positive_scaling_preserves_codes(
        values in finite_values(48),
        exp in -6i32..=6,
    ) {
        // powers of two are exact in f32, so scaling is exactly homogeneous
        let c = 2.0f32.powi(exp);
        let t = Tensor::new(vec![values.len()], values.clone()).unwrap();
        let scaled_vals: Vec<f32> = values.iter().map(|x| x * c).collect();
        prop_assume!(scaled_vals.iter().all(|x| x.is_finite()));
        let scaled = Tensor::new(vec![scaled_vals.len()], scaled_vals).unwrap();
        let g = Granularity::PerVector { v: 4 };
        let q = |t: &Tensor| {
            let alphas = calibration::calibrate(t, g, CalibMethod::Max).unwrap();
            quant::quantize_single(t, 4, true, false, g, &alphas, Rounding::HalfAwayFromZero)
                .unwrap()
                .int_data
        };
        prop_assert_eq!(q(&t), q(&scaled));
    }
}
