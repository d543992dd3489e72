#![allow(dead_code)]

use std::collections::VecDeque;

use ergokit::linalg::Matrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Column-stochastic matrix with i.i.d. uniform weights.
pub fn random_stochastic(n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(n, n);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let s: f64 = col.iter().sum();
        for i in 0..n {
            m[(i, j)] = col[i] / s;
        }
    }
    m
}

/// Reversible chain from symmetric positive weights: `P[i][j] = W[i][j] / sum_k W[k][j]`.
/// `laziness` mixes in the identity, shrinking the gap.
pub fn random_reversible(n: usize, seed: u64, laziness: f64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = rng.random::<f64>().powi(3) + 0.01;
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    let sums = w.column_sums();
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let base = w[(i, j)] / sums[j];
            p[(i, j)] = (1.0 - laziness) * base + if i == j { laziness } else { 0.0 };
        }
    }
    p
}

pub fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

/// Eigenvalue moduli, descending, from a dense eigensolver.
pub fn eigen_moduli(m: &Matrix) -> Vec<f64> {
    let mut v: Vec<f64> = to_nalgebra(m).complex_eigenvalues().iter().map(|z| z.norm()).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// `1 - |lambda_2|` from the dense eigensolver.
pub fn dense_gap(m: &Matrix) -> f64 {
    1.0 - eigen_moduli(m)[1]
}

/// Histogram of a long noisy orbit, normalized to masses per bin.
pub fn orbit_histogram(
    map: &ergokit::MapSpec,
    kernel: &ergokit::NoiseKernel,
    n_bins: usize,
    steps: usize,
    burn_in: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: f64 = rng.random();
    let mut hist = vec![0.0; n_bins];
    for t in 0..steps + burn_in {
        x = kernel.sample(map.eval(x).unwrap(), &mut rng);
        if t >= burn_in {
            let b = ((x * n_bins as f64) as usize).min(n_bins - 1);
            hist[b] += 1.0;
        }
    }
    hist.iter_mut().for_each(|h| *h /= steps as f64);
    hist
}

pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Closed classes by brute-force reachability.
pub fn closed_classes_bfs(m: &Matrix) -> Vec<Vec<usize>> {
    let n = m.rows();
    let reach: Vec<Vec<bool>> = (0..n)
        .map(|s| {
            let mut seen = vec![false; n];
            let mut queue = VecDeque::from([s]);
            seen[s] = true;
            while let Some(i) = queue.pop_front() {
                for j in 0..n {
                    if m[(j, i)] > 1e-14 && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            seen
        })
        .collect();
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let closed = (0..n).all(|j| !reach[i][j] || reach[j][i]);
        if closed && !classes.iter().any(|c| c.contains(&i)) {
            classes.push((0..n).filter(|&j| reach[i][j]).collect());
        }
    }
    classes.sort();
    classes
}
