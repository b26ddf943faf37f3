//! Deterministic seeded fixtures for tests, benchmarks, and the CLI sweep
//! command. ChaCha keeps the streams identical across platforms.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Layer, Network};
use crate::tensor::Tensor;

/// Uniform tensor in `[-scale, scale]`.
pub fn seeded_tensor(shape: &[usize], seed: u64, scale: f32) -> Result<Tensor> {
    let count: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..count)
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Integer-valued tensor in `[-max_abs, max_abs]`; exact in f32/f64, so sums
/// are order-independent.
pub fn seeded_int_tensor(shape: &[usize], seed: u64, max_abs: i32) -> Result<Tensor> {
    let count: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..count)
        .map(|_| rng.random_range(-max_abs..=max_abs) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Small three-layer CNN with mixed scale magnitudes per output channel, so
/// coarse scaling visibly underperforms per-vector scaling. Frozen shape:
/// input [16, 8, 8], conv3x3 16->16 (relu), conv3x3 16->32 (relu),
/// conv1x1 32->16.
pub fn fixture_network(seed: u64) -> (Network, Tensor) {
    let make_weights = |shape: &[usize], seed: u64| {
        let base = seeded_tensor(shape, seed, 1.0).expect("valid fixture shape");
        // spread magnitudes over two orders across input channels (so coarse
        // per-channel scaling is visibly lossy) and one order across output
        // channels (so per-layer scaling is worse still)
        let (k, c) = (shape[0], shape[1]);
        let per_k: usize = shape[1..].iter().product();
        let per_c: usize = shape[2..].iter().product();
        let data: Vec<f32> = base
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let ko = i / per_k;
                let ci = (i % per_k) / per_c;
                x * 10.0f32.powf(-2.0 * ci as f32 / c as f32 - ko as f32 / k as f32)
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("finite fixture")
    };
    let layers = vec![
        Layer {
            name: "conv0".to_string(),
            weights: make_weights(&[16, 16, 3, 3], seed),
            bias: None,
            stride: 1,
            padding: 1,
            relu: true,
        },
        Layer {
            name: "conv1".to_string(),
            weights: make_weights(&[32, 16, 3, 3], seed.wrapping_add(1)),
            bias: None,
            stride: 1,
            padding: 1,
            relu: true,
        },
        Layer {
            name: "conv2".to_string(),
            weights: make_weights(&[16, 32, 1, 1], seed.wrapping_add(2)),
            bias: None,
            stride: 1,
            padding: 0,
            relu: false,
        },
    ];
    let input = seeded_tensor(&[16, 8, 8], seed.wrapping_add(100), 1.0).expect("valid shape");
    (
        Network {
            layers,
            input_shape: vec![16, 8, 8],
        },
        input,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_tensor_is_deterministic() {
        let a = seeded_tensor(&[3, 4], 9, 2.0).unwrap();
        let b = seeded_tensor(&[3, 4], 9, 2.0).unwrap();
        assert_eq!(a.data(), b.data());
        let c = seeded_tensor(&[3, 4], 10, 2.0).unwrap();
        assert_ne!(a.data(), c.data());
        assert!(a.data().iter().all(|x| x.abs() <= 2.0));
    }

    #[test]
    fn int_tensor_is_integral() {
        let t = seeded_int_tensor(&[5, 5], 3, 6).unwrap();
        assert!(t.data().iter().all(|x| x.fract() == 0.0 && x.abs() <= 6.0));
    }

    #[test]
    fn network_shapes() {
        let (net, input) = fixture_network(42);
        assert_eq!(net.layers.len(), 3);
        assert_eq!(input.shape(), &[16, 8, 8]);
        assert_eq!(net.layers[0].weights.shape(), &[16, 16, 3, 3]);
    }
}
