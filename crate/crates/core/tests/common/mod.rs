#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stylenet::autodiff::{Graph, Var};
use stylenet::models::{ArchConfig, BranchLayer, Variant};
use stylenet::{Result, Tensor};

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    // keep away from relu / max-pool kinks
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub type OpFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

pub fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| {
            g.add(v[0], v[1])
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, v| {
            g.mul(v[0], v[1])
        }),
        ("scale", vec![vec![5]], |g, v| g.scale(v[0], 2.5)),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            g.matmul(v[0], v[1])
        }),
        ("linear", vec![vec![3, 5], vec![2, 5], vec![2]], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        }),
        (
            "conv2d",
            vec![vec![2, 3, 8, 8], vec![4, 3, 3, 3], vec![4]],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        ),
        (
            "conv2d_k4s2",
            vec![vec![1, 2, 7, 7], vec![3, 2, 4, 4]],
            |g, v| g.conv2d(v[0], v[1], None, 2, 0),
        ),
        ("add_bias", vec![vec![2, 3, 2, 2], vec![3]], |g, v| {
            g.add_bias(v[0], v[1])
        }),
        ("relu", vec![vec![10]], |g, v| g.relu(v[0])),
        ("tanh", vec![vec![10]], |g, v| g.tanh(v[0])),
        (
            "instance_norm",
            vec![vec![2, 3, 4, 4], vec![3], vec![3]],
            |g, v| g.instance_norm(v[0], v[1], v[2]),
        ),
        ("max_pool", vec![vec![1, 2, 4, 4]], |g, v| {
            g.max_pool(v[0], 2, 2)
        }),
        ("spatial_mean", vec![vec![2, 3, 3, 3]], |g, v| {
            g.spatial_mean(v[0])
        }),
        ("softmax", vec![vec![3, 4]], |g, v| g.softmax(v[0])),
        ("cross_entropy", vec![vec![3, 4]], |g, v| {
            g.cross_entropy(v[0], &[0, 3, 1])
        }),
        ("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, v| {
            g.concat(&[v[0], v[1]], 1)
        }),
        ("gram", vec![vec![2, 3, 3, 4]], |g, v| g.gram(v[0])),
        ("select_columns", vec![vec![2, 5]], |g, v| {
            g.select_columns(v[0], &[4, 1, 1])
        }),
        ("weighted_sum", vec![vec![2, 3], vec![2, 3, 4]], |g, v| {
            g.weighted_sum(v[0], v[1])
        }),
        ("sum", vec![vec![2, 3]], |g, v| g.sum(v[0])),
    ]
}

pub fn random_image<T: stylenet::Scalar>(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor<T> {
    let data: Vec<f64> = (0..n * 3 * size * size)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    Tensor::from_f64(&[n, 3, size, size], &data).unwrap()
}

/// Eigenvalue oracle independent of the crate.
pub fn min_eigenvalue(m: &Tensor<f64>) -> f64 {
    let c = m.shape()[0];
    let dm = DMatrix::from_row_slice(c, c, m.data());
    dm.symmetric_eigenvalues().min()
}

/// Narrow 8×8 configs for finite-difference checks.
pub fn small_config(variant: Variant) -> ArchConfig {
    let mut cfg = ArchConfig::new(variant).with_seed(7);
    cfg.input_size = 8;
    cfg.stem_width = 4;
    cfg.stage_widths = vec![4, 6];
    cfg.truncation = 9;
    cfg.embed_dim = 6;
    cfg.branches = (1..=3)
        .map(|depth| vec![BranchLayer::new(2, 2, 4); depth])
        .collect();
    cfg
}
