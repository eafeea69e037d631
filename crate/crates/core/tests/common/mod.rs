#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tunevec_core::{Checkpoint, DType, Matrix, TensorRecord};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix<f64> {
    Matrix::from_vec(m, n, gaussian(rng, m * n))
}

pub fn record(name: &str, dtype: DType, shape: Vec<usize>, values: &[f64]) -> TensorRecord {
    TensorRecord::from_values(name, dtype, shape, values).unwrap()
}

/// Toy-layout checkpoint with random projection weights.
pub fn random_toy(rng: &mut ChaCha8Rng, layers: usize, d: usize, f: usize, dtype: DType) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.insert(record(
        "tok_embeddings.weight",
        dtype,
        vec![16, d],
        &gaussian(rng, 16 * d),
    ))
    .unwrap();
    c.insert(record("norm.weight", dtype, vec![d], &vec![1.0; d])).unwrap();
    for l in 0..layers {
        for p in ["wq", "wk", "wv", "wo"] {
            let name = format!("layers.{l}.attn.{p}");
            c.insert(record(&name, dtype, vec![d, d], &gaussian(rng, d * d)))
                .unwrap();
        }
        for (p, shape) in [("w_gate", [f, d]), ("w_up", [f, d]), ("w_down", [d, f])] {
            let name = format!("layers.{l}.ffn.{p}");
            c.insert(record(&name, dtype, shape.to_vec(), &gaussian(rng, f * d)))
                .unwrap();
        }
        c.insert(record(
            &format!("layers.{l}.attn_norm.weight"),
            dtype,
            vec![d],
            &vec![1.0; d],
        ))
        .unwrap();
    }
    c
}

/// Same names and shapes as `base`, each value perturbed by `scale · N(0,1)`.
pub fn perturbed(rng: &mut ChaCha8Rng, base: &Checkpoint, scale: f64) -> Checkpoint {
    let mut c = Checkpoint::new();
    for rec in base.tensors() {
        let vals: Vec<f64> = rec
            .values::<f64>()
            .into_iter()
            .map(|v| {
                let g: f64 = StandardNormal.sample(rng);
                v + scale * g * rng.random_range(0.5..1.5)
            })
            .collect();
        c.insert(record(rec.name(), rec.dtype(), rec.shape().to_vec(), &vals))
            .unwrap();
    }
    c
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
