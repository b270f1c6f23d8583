//! Dense-tensor math, reverse-mode differentiation, Adam, checkpoints.
//!
//! All training math is f64; checkpoints narrow to f32 on disk. Graphs are
//! immutable once built and safe to read concurrently; optimizer updates
//! mutate parameter stores and are serialized by the callers.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use graph::{finite_difference_oracle, Graph, GraphBuilder, NodeId};
pub use optim::{AdamConfig, Optimizer};
pub use tensor::Tensor;

use rand::Rng;
use std::collections::BTreeMap;

/// Named trainable tensors. BTreeMap keeps update order deterministic.
pub type ParamStore = BTreeMap<String, Tensor>;

/// Uniform ±sqrt(6/(fan_in+fan_out)) init for weight matrices.
pub fn xavier_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

/// N(0, 0.02²) init for embedding tables.
pub fn normal_embedding(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            // Box-Muller keeps us off rand_distr for one distribution.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            0.02 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape/data agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn xavier_bound_respected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = xavier_uniform(&mut rng, &[16, 8], 16, 8);
        let bound = (6.0 / 24.0_f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn embedding_init_scale() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = normal_embedding(&mut rng, 200, 50);
        let var: f64 =
            t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        assert!((var.sqrt() - 0.02).abs() < 0.002, "std {}", var.sqrt());
    }
}
