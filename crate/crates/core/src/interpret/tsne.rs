use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{derive_index, rng_for};

#[derive(Clone, Debug, PartialEq)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_switch: usize,
    pub entropy_tolerance: f64,
    pub max_bisection: usize,
}

impl Default for TsneOptions {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            seed: 0,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_switch: 250,
            entropy_tolerance: 1e-5,
            max_bisection: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    pub kl: f64,
    /// KL right after early exaggeration ends; `None` if the run is shorter.
    pub kl_after_exaggeration: Option<f64>,
    pub perplexity: f64,
}

fn sq_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    d.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, out) in row.iter_mut().enumerate() {
            *out = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    });
    d
}

/// Row `i` of conditional probabilities whose entropy (nats) matches
/// `ln(perplexity)`, found by bisection on the Gaussian precision.
fn conditional_row(d: &[f64], i: usize, opts: &TsneOptions, out: &mut [f64]) {
    let target = opts.perplexity.ln();
    let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
    let dmin = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    for _ in 0..opts.max_bisection {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for (j, (&dij, o)) in d.iter().zip(out.iter_mut()).enumerate() {
            // shift by the nearest distance so the exponentials stay finite
            *o = if j == i {
                0.0
            } else {
                (-(dij - dmin) * beta).exp()
            };
            sum += *o;
            weighted += *o * (dij - dmin);
        }
        let entropy = sum.ln() + beta * weighted / sum;
        out.iter_mut().for_each(|o| *o /= sum);
        let diff = entropy - target;
        if diff.abs() < opts.entropy_tolerance {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() {
                (beta + hi) / 2.0
            } else {
                beta * 2.0
            };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
}

fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                num[i * n + j] = 1.0 / (1.0 + dx * dx + dy * dy);
                z += num[i * n + j];
            }
        }
    }
    let mut kl = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        if k / n != k % n && pk > 0.0 {
            let q = (num[k] / z).max(1e-300);
            kl += pk * (pk / q).ln();
        }
    }
    kl.max(0.0)
}

/// Exact t-SNE with point `i` initialized from `N(0, 1e-4)` seeded by
/// `(opts.seed, i)`.
pub fn tsne(vectors: &[Vec<f64>], opts: &TsneOptions) -> Result<Projection> {
    let keys: Vec<u64> = (0..vectors.len() as u64).collect();
    tsne_keyed(vectors, &keys, opts)
}

/// As [`tsne`], but point `i` draws its initial position from `keys[i]`.
/// Points are processed in key order, so permuting vectors and keys together
/// permutes the output the same way, bit for bit.
pub fn tsne_keyed(vectors: &[Vec<f64>], keys: &[u64], opts: &TsneOptions) -> Result<Projection> {
    let n = vectors.len();
    if n < 5 {
        return Err(Error::usage(format!(
            "t-SNE needs at least 5 points, got {n}"
        )));
    }
    if keys.len() != n {
        return Err(Error::usage("one init key per point required"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| keys[i]);
    if order.windows(2).any(|w| keys[w[0]] == keys[w[1]]) {
        return Err(Error::usage("t-SNE init keys must be distinct"));
    }
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| vectors[i].clone()).collect();
    let sorted_keys: Vec<u64> = order.iter().map(|&i| keys[i]).collect();
    let mut proj = tsne_ordered(&sorted, &sorted_keys, opts)?;
    let mut points = vec![[0.0; 2]; n];
    for (pos, &i) in order.iter().enumerate() {
        points[i] = proj.points[pos];
    }
    proj.points = points;
    Ok(proj)
}

fn tsne_ordered(vectors: &[Vec<f64>], keys: &[u64], opts: &TsneOptions) -> Result<Projection> {
    let n = vectors.len();
    if !(opts.perplexity > 0.0 && opts.perplexity < n as f64 / 3.0) {
        return Err(Error::usage(format!(
            "perplexity {} must be in (0, n/3) for n = {n}",
            opts.perplexity
        )));
    }
    let dim = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::usage(format!(
            "vectors differ in length ({dim} vs {})",
            v.len()
        )));
    }
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { op: "tsne input" });
    }

    let init = Normal::new(0.0, 1e-2).expect("valid normal");
    let mut y: Vec<[f64; 2]> = keys
        .iter()
        .map(|&k| {
            let mut rng = rng_for(derive_index(opts.seed, k), "tsne:init");
            [init.sample(&mut rng), init.sample(&mut rng)]
        })
        .collect();

    let d = sq_distances(vectors);
    let mut p = vec![0.0; n * n];
    p.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| conditional_row(&d[i * n..(i + 1) * n], i, opts, row));
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
        sym[i * n + i] = 0.0;
    }
    let p = sym;

    if d.iter().all(|&v| v == 0.0) {
        warn!("t-SNE input points are all identical; returning the initial layout");
        let kl = kl_divergence(&p, &y);
        return Ok(Projection {
            points: y,
            kl,
            kl_after_exaggeration: None,
            perplexity: opts.perplexity,
        });
    }

    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut kl_after_exaggeration = None;
    for it in 0..opts.iterations {
        if it == opts.exaggeration_iters {
            kl_after_exaggeration = Some(kl_divergence(&p, &y));
        }
        let exag = if it < opts.exaggeration_iters {
            opts.exaggeration
        } else {
            1.0
        };
        let momentum = if it < opts.momentum_switch { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = if i == j {
                    0.0
                } else {
                    let dx = y[i][0] - y[j][0];
                    let dy = y[i][1] - y[j][1];
                    1.0 / (1.0 + dx * dx + dy * dy)
                };
                num[i * n + j] = v;
                z += v;
            }
        }
        for i in 0..n {
            let mut grad = [0.0f64; 2];
            for j in 0..n {
                let k = i * n + j;
                let m = (exag * p[k] - num[k] / z) * num[k];
                grad[0] += 4.0 * m * (y[i][0] - y[j][0]);
                grad[1] += 4.0 * m * (y[i][1] - y[j][1]);
            }
            for a in 0..2 {
                let same_sign = (grad[a] > 0.0) == (update[i][a] > 0.0);
                gains[i][a] = if same_sign {
                    (gains[i][a] * 0.8).max(0.01)
                } else {
                    gains[i][a] + 0.2
                };
                update[i][a] = momentum * update[i][a] - opts.learning_rate * gains[i][a] * grad[a];
            }
        }
        for (yi, u) in y.iter_mut().zip(&update) {
            yi[0] += u[0];
            yi[1] += u[1];
        }
        let (mx, my) = y.iter().fold((0.0, 0.0), |(a, b), v| (a + v[0], b + v[1]));
        for yi in &mut y {
            yi[0] -= mx / n as f64;
            yi[1] -= my / n as f64;
        }
        if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::NumericOverflow { op: "tsne" });
        }
    }
    Ok(Projection {
        kl: kl_divergence(&p, &y),
        points: y,
        kl_after_exaggeration,
        perplexity: opts.perplexity,
    })
}

/// Mean silhouette coefficient under Euclidean distance. Points alone in
/// their cluster score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let n = points.len();
    if n != labels.len() || n == 0 {
        return Err(Error::usage("silhouette needs one label per point"));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] += dist(&points[i], &points[j]);
                    counts[labels[j]] += 1;
                }
            }
            let own = labels[i];
            if counts[own] == 0 {
                return 0.0;
            }
            let a = sums[own] / counts[own] as f64;
            let b = (0..k)
                .filter(|&c| c != own && counts[c] > 0)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return 0.0;
            }
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(total / n as f64)
}

/// Text rows `x,y,label,path`.
pub fn write_projection(
    path: &Path,
    proj: &Projection,
    labels: &[String],
    paths: &[String],
) -> Result<()> {
    if labels.len() != proj.points.len() || paths.len() != proj.points.len() {
        return Err(Error::usage(
            "one label and path per projected point required",
        ));
    }
    let mut out = String::new();
    for ((p, l), src) in proj.points.iter().zip(labels).zip(paths) {
        writeln!(out, "{:?},{:?},{l},{src}", p[0], p[1]).expect("write to string");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silhouette_hand_example() {
        // clusters {0, 1} and {10, 12} on a line
        let pts: Vec<Vec<f64>> = [0.0, 1.0, 10.0, 12.0].iter().map(|&v| vec![v]).collect();
        let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
        let want = [
            1.0 - 1.0 / 11.0,
            1.0 - 1.0 / 10.0,
            1.0 - 2.0 / 9.5,
            1.0 - 2.0 / 11.5,
        ]
        .iter()
        .sum::<f64>()
            / 4.0;
        assert!((s - want).abs() < 1e-12);
    }

    #[test]
    fn bisection_matches_target_perplexity() {
        let pts: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i as f64).sin() * 3.0, i as f64 * 0.1])
            .collect();
        let d = sq_distances(&pts);
        let opts = TsneOptions {
            perplexity: 5.0,
            ..Default::default()
        };
        let mut row = vec![0.0; 30];
        conditional_row(&d[0..30], 0, &opts, &mut row);
        let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
        assert!((h - 5f64.ln()).abs() < 1e-4, "entropy {h}");
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_perplexity_and_small_inputs() {
        let pts = vec![vec![0.0]; 4];
        assert!(matches!(
            tsne(&pts, &TsneOptions::default()),
            Err(Error::Usage(_))
        ));
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64]).collect();
        assert!(matches!(
            tsne(&pts, &TsneOptions::default()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn identical_points_return_initial_layout() {
        let pts = vec![vec![1.0, 2.0]; 20];
        let opts = TsneOptions {
            perplexity: 5.0,
            ..Default::default()
        };
        let a = tsne(&pts, &opts).unwrap();
        let b = tsne(
            &pts,
            &TsneOptions {
                iterations: 5,
                ..opts
            },
        )
        .unwrap();
        assert_eq!(a.points, b.points);
        assert!(a.kl >= 0.0);
    }
}
