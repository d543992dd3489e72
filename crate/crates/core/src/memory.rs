//! Memory of a noisy system: capacity of its discretized transition channel.

use log::debug;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::maps::MapSpec;
use crate::noise::{Boundary, KernelFamily, NoiseKernel};
use crate::transfer::{build_ulam, DEFAULT_QUAD_ORDER};

/// Row-stochastic channel: row `i` is the law of the output given input `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    w: Matrix,
}

impl ChannelMatrix {
    /// Rows must be nonnegative and sum to 1 within 1e-9; they are then
    /// renormalized exactly.
    pub fn new(mut w: Matrix) -> Result<Self> {
        if !w.is_square() || w.rows() < 1 {
            return Err(Error::InvalidArgument("channel matrix must be square and non-empty".into()));
        }
        for i in 0..w.rows() {
            let row = w.row_mut(i);
            if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("row {i} sums to {s}")));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(Self { w })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn identity(n: usize) -> Self {
        Self { w: Matrix::identity(n) }
    }

    pub fn binary_symmetric(p: f64) -> Result<Self> {
        Self::from_rows(&[vec![1.0 - p, p], vec![p, 1.0 - p]])
    }

    pub fn n_states(&self) -> usize {
        self.w.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.w.row(i)
    }

    /// Channel of `k` consecutive uses, by repeated squaring.
    pub fn power(&self, k: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("lag must be at least 1".into()));
        }
        let mut result: Option<Matrix> = None;
        let mut base = self.w.clone();
        let mut e = k;
        loop {
            if e & 1 == 1 {
                result = Some(match result {
                    None => base.clone(),
                    Some(r) => r.matmul(&base),
                });
            }
            e >>= 1;
            if e == 0 {
                break;
            }
            base = base.matmul(&base);
        }
        let mut w = result.expect("k >= 1");
        for i in 0..w.rows() {
            let row = w.row_mut(i);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(Self { w })
    }
}

/// Channel of the discretized system: the Ulam matrix read row-wise.
pub fn channel_matrix(
    map: &MapSpec,
    kernel: &NoiseKernel,
    n_states: usize,
    quad_order: usize,
) -> Result<ChannelMatrix> {
    let p = build_ulam(map, kernel, n_states, quad_order)?;
    let mut w = p.matrix.transpose();
    for i in 0..n_states {
        let row = w.row_mut(i);
        row.iter_mut().for_each(|v| *v = v.max(0.0));
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(ChannelMatrix { w })
}

fn plogp_sum(row: &[f64]) -> f64 {
    row.iter().filter(|&&v| v > 0.0).map(|&v| v * v.log2()).sum()
}

/// Output law `q = mu W`.
fn output_law(mu: &[f64], w: &Matrix) -> Vec<f64> {
    let n = w.cols();
    let chunk = 64;
    mu.par_chunks(chunk)
        .enumerate()
        .map(|(c, block)| {
            let mut acc = vec![0.0; n];
            for (k, &m) in block.iter().enumerate() {
                if m != 0.0 {
                    for (a, v) in acc.iter_mut().zip(w.row(c * chunk + k)) {
                        *a += m * v;
                    }
                }
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        // fixed summation order keeps results identical across thread counts
        .fold(vec![0.0; n], |mut a, b| {
            a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            a
        })
}

/// `I(X;Y)` in bits for input law `mu`.
pub fn mutual_information(mu: &[f64], w: &ChannelMatrix) -> Result<f64> {
    let n = w.n_states();
    if mu.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: mu.len() });
    }
    if mu.iter().any(|v| !(*v >= 0.0)) || (mu.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("input is not a probability vector".into()));
    }
    let q = output_law(mu, &w.w);
    let h_y = -plogp_sum(&q);
    let h_y_given_x: f64 = mu
        .par_iter()
        .enumerate()
        .map(|(i, &m)| if m > 0.0 { -m * plogp_sum(w.row(i)) } else { 0.0 })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok((h_y - h_y_given_x).max(0.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct CapacityResult {
    pub capacity_bits: f64,
    pub input_distribution: Vec<f64>,
    pub iterations: usize,
    /// Upper bound minus lower bound at termination.
    pub certified_slack: f64,
    /// Mutual information after each iteration (starting from the uniform input).
    #[serde(skip)]
    pub trace: Vec<f64>,
}

/// Blahut–Arimoto. With `D_i = D(W_i || q)` the current rate is
/// `I = sum mu_i D_i` and `max_i D_i` bounds the capacity from above, so the
/// loop stops once `max_i D_i - I <= tol`.
///
/// Plain iterations converge slowly once the optimal input is supported on a few
/// atoms, so after 50, 100, 200, ... iterations an active-set Newton polish is
/// tried from the current input law. Its result replaces the iterate only if the
/// rate does not drop, which keeps the ascent monotone.
pub fn capacity(w: &ChannelMatrix, tol: f64, max_iter: usize) -> Result<CapacityResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let n = w.n_states();
    let neg_h: Vec<f64> = (0..n).into_par_iter().map(|i| plogp_sum(w.row(i))).collect();
    let divergences = |mu: &[f64]| -> Vec<f64> {
        let q = output_law(mu, &w.w);
        let log_q: Vec<f64> = q.iter().map(|&v| if v > 0.0 { v.log2() } else { 0.0 }).collect();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let cross: f64 = w
                    .row(i)
                    .iter()
                    .zip(&log_q)
                    .filter(|(v, _)| **v > 0.0)
                    .map(|(v, l)| v * l)
                    .sum();
                neg_h[i] - cross
            })
            .collect()
    };
    let rate_of = |mu: &[f64], d: &[f64]| -> f64 { mu.iter().zip(d).map(|(m, di)| m * di).sum() };
    let mut mu = vec![1.0 / n as f64; n];
    let mut d = divergences(&mu);
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let rate = rate_of(&mu, &d);
        let upper = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if let Some(&prev) = trace.last() {
            assert!(rate >= prev - 1e-10, "Blahut–Arimoto rate decreased: {prev} -> {rate}");
        }
        trace.push(rate);
        let slack = (upper - rate).max(0.0);
        if slack <= tol {
            debug!("capacity {rate} after {iterations} iterations, slack {slack}");
            return Ok(CapacityResult {
                capacity_bits: rate.clamp(0.0, (n as f64).log2()),
                input_distribution: mu,
                iterations,
                certified_slack: slack,
                trace,
            });
        }
        if iterations >= max_iter {
            return Err(Error::NotConverged { iterations, residual: slack });
        }
        if iterations >= POLISH_START && (iterations / POLISH_START).is_power_of_two() && iterations % POLISH_START == 0 {
            let best = newton_polish(w, &neg_h, &mu, POLISH_SEED)
                .map(|cand| {
                    let dc = divergences(&cand);
                    let r = rate_of(&cand, &dc);
                    (cand, dc, r)
                })
                .filter(|(_, _, r)| *r >= rate);
            if let Some((cand, dc, r)) = best {
                let certified = dc.iter().copied().fold(f64::NEG_INFINITY, f64::max) - r <= tol;
                if certified {
                    mu = cand;
                    d = dc;
                } else {
                    // keep every input alive for the multiplicative update; concavity
                    // keeps the blend's rate at or above the current one
                    mu = cand.iter().zip(&mu).map(|(c, m)| 0.99 * c + 0.01 * m).collect();
                    d = divergences(&mu);
                }
                iterations += 1;
                continue;
            }
        }
        // mu_i <- mu_i 2^(D_i - upper) / Z, shifted for stability
        let mut z = 0.0;
        for (m, di) in mu.iter_mut().zip(&d) {
            *m *= (di - upper).exp2();
            z += *m;
        }
        mu.iter_mut().for_each(|m| *m /= z);
        d = divergences(&mu);
        iterations += 1;
    }
}

const POLISH_START: usize = 50;
const POLISH_ROUNDS: usize = 400;
const NEWTON_STEPS: usize = 10;
/// Number of heaviest inputs seeding each polish.
const POLISH_SEED: usize = 32;
const FW_BATCH: usize = 16;

/// Divergences `D(W_i || q)` in bits for the listed inputs.
fn divergences_from(w: &ChannelMatrix, q: &[f64], rows: &[usize]) -> Vec<f64> {
    rows.par_iter()
        .map(|&i| {
            w.row(i)
                .iter()
                .zip(q)
                .filter(|(v, _)| **v > 0.0)
                .map(|(v, qy)| v * (v / qy).log2())
                .sum()
        })
        .collect()
}

fn support_output_law(w: &ChannelMatrix, mu: &[f64], support: &[usize]) -> Vec<f64> {
    let mut q = vec![0.0; w.n_states()];
    for &i in support {
        q.iter_mut().zip(w.row(i)).for_each(|(qy, v)| *qy += mu[i] * v);
    }
    q
}

/// Fully corrective ascent seeded with the `keep` heaviest inputs of `mu0`.
/// Each round maximizes the rate over the current support with projected Newton
/// steps, then moves mass (Frank–Wolfe) to the input of largest divergence.
/// Every accepted move raises the rate.
fn newton_polish(w: &ChannelMatrix, neg_h: &[f64], mu0: &[f64], keep: usize) -> Option<Vec<f64>> {
    let n = w.n_states();
    let mut order: Vec<usize> = (0..n).filter(|&i| mu0[i] > 0.0).collect();
    if order.len() < 2 {
        return None;
    }
    order.sort_by(|&a, &b| mu0[b].total_cmp(&mu0[a]));
    order.truncate(keep);
    let mut mu = vec![0.0; n];
    order.iter().for_each(|&i| mu[i] = mu0[i]);
    let z: f64 = mu.iter().sum();
    mu.iter_mut().for_each(|m| *m /= z);
    let mut rate = sparse_information(w, neg_h, &mu);
    let all: Vec<usize> = (0..n).collect();
    let mut best = (f64::INFINITY, mu.clone());
    let mut stale = 0;
    for _ in 0..POLISH_ROUNDS {
        rate = face_newton(w, neg_h, &mut mu, rate);
        let support: Vec<usize> = (0..n).filter(|&i| mu[i] > 0.0).collect();
        let q = support_output_law(w, &mu, &support);
        let d = divergences_from(w, &q, &all);
        let (j, dj) = d.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        let gap = dj - rate;
        if gap < best.0 {
            best = (gap, mu.clone());
            stale = 0;
        } else if gap.is_finite() {
            stale += 1;
        }
        if gap <= 1e-13 || stale >= 20 {
            break;
        }
        // one new input per strong local maximum of the divergence, largest first
        let mut entering: Vec<usize> = (0..n)
            .filter(|&i| mu[i] == 0.0 && d[i] - rate >= 0.5 * gap)
            .filter(|&i| (i == 0 || d[i] >= d[i - 1]) && (i + 1 == n || d[i] >= d[i + 1]))
            .collect();
        entering.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
        entering.truncate(FW_BATCH);
        if entering.is_empty() {
            entering.push(j);
        }
        let Some((cand, r)) = frank_wolfe(w, neg_h, &mu, &entering, rate) else { break };
        mu = cand;
        rate = r;
    }
    Some(best.1)
}

/// Rounding allowance when a step leaves the rate unchanged to working precision.
fn flat(rate: f64) -> f64 {
    1e-14 * (1.0 + rate.abs())
}

/// Projected Newton ascent of the rate on the face of positive-mass inputs.
fn face_newton(w: &ChannelMatrix, neg_h: &[f64], mu: &mut Vec<f64>, mut rate: f64) -> f64 {
    use nalgebra::{DMatrix, DVector};
    let ln2 = std::f64::consts::LN_2;
    for _ in 0..NEWTON_STEPS {
        let support: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] > 0.0).collect();
        let m = support.len();
        if m < 2 {
            break;
        }
        let q = support_output_law(w, mu, &support);
        let d = divergences_from(w, &q, &support);
        let mean: f64 = support.iter().zip(&d).map(|(&i, di)| mu[i] * di).sum();
        let residual = d.iter().map(|di| (di - mean).abs()).fold(0.0, f64::max);
        if residual < 1e-13 {
            break;
        }
        let cols: Vec<usize> = (0..q.len()).filter(|&y| q[y] > 0.0).collect();
        let a = DMatrix::from_fn(m, cols.len(), |r, c| w.w[(support[r], cols[c])] / q[cols[c]].sqrt());
        let gram = &a * a.transpose();
        let tau = 1e-12 * gram.diagonal().amax();
        // (G/ln2 + tau) delta + nu 1 = D, 1^T delta = 0
        let mut jac = DMatrix::zeros(m + 1, m + 1);
        let mut rhs = DVector::zeros(m + 1);
        for r in 0..m {
            for k in 0..m {
                jac[(r, k)] = gram[(r, k)] / ln2;
            }
            jac[(r, r)] += tau;
            jac[(r, m)] = 1.0;
            jac[(m, r)] = 1.0;
            rhs[r] = d[r];
        }
        let Some(step) = jac.lu().solve(&rhs) else { break };
        let mut t_max = f64::INFINITY;
        let mut blocking = None;
        for (r, &i) in support.iter().enumerate() {
            if step[r] < 0.0 && -mu[i] / step[r] < t_max {
                t_max = -mu[i] / step[r];
                blocking = Some(i);
            }
        }
        // full projected step, then the step to the face boundary, then backtracking
        let mut trials = vec![(1.0, None)];
        if t_max < 1.0 {
            trials.push((t_max, blocking));
        }
        let mut t = t_max.min(1.0);
        for _ in 0..30 {
            t *= 0.5;
            trials.push((t, None));
        }
        let mut improved = false;
        for (t, drop) in trials {
            let mut cand = mu.clone();
            for (r, &i) in support.iter().enumerate() {
                cand[i] = (mu[i] + t * step[r]).max(0.0);
            }
            if let Some(i) = drop {
                cand[i] = 0.0;
            }
            let z: f64 = cand.iter().sum();
            if z > 0.0 {
                cand.iter_mut().for_each(|v| *v /= z);
                let r = sparse_information(w, neg_h, &cand);
                let neutral = t == 1.0 && r >= rate - flat(rate) && face_residual(w, &cand) < 0.5 * residual;
                if r > rate || neutral {
                    *mu = cand;
                    rate = r.max(rate);
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            break;
        }
    }
    rate
}

/// Largest deviation of a support divergence from the rate.
fn face_residual(w: &ChannelMatrix, mu: &[f64]) -> f64 {
    let support: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] > 0.0).collect();
    let q = support_output_law(w, mu, &support);
    let d = divergences_from(w, &q, &support);
    let mean: f64 = support.iter().zip(&d).map(|(&i, di)| mu[i] * di).sum();
    d.iter().map(|di| (di - mean).abs()).fold(0.0, f64::max)
}

fn output_entropy(q: &[f64]) -> f64 {
    -q.iter().filter(|&&v| v > 0.0).map(|&v| v * v.log2()).sum::<f64>()
}

/// Mutual information in bits, `H(q) - sum_i mu_i H(W_i)`, touching only the rows
/// with positive input mass. `neg_h[i]` is `-H(W_i)`.
fn sparse_information(w: &ChannelMatrix, neg_h: &[f64], mu: &[f64]) -> f64 {
    let active: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] > 0.0).collect();
    let q = support_output_law(w, mu, &active);
    active.iter().map(|&i| mu[i] * neg_h[i]).sum::<f64>() + output_entropy(&q)
}

/// Golden-section line search from `mu` toward the uniform law on `entering`.
/// The output law is affine along the segment, so each probe costs one entropy.
fn frank_wolfe(
    w: &ChannelMatrix,
    neg_h: &[f64],
    mu: &[f64],
    entering: &[usize],
    rate: f64,
) -> Option<(Vec<f64>, f64)> {
    let share = 1.0 / entering.len() as f64;
    let support: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] > 0.0).collect();
    let q0 = support_output_law(w, mu, &support);
    let target: Vec<f64> = {
        let mut v = vec![0.0; mu.len()];
        entering.iter().for_each(|&j| v[j] = share);
        v
    };
    let q1 = support_output_law(w, &target, entering);
    let h0: f64 = support.iter().map(|&i| mu[i] * neg_h[i]).sum();
    let h1: f64 = entering.iter().map(|&j| share * neg_h[j]).sum();
    let f = |s: f64| {
        let q: Vec<f64> = q0.iter().zip(&q1).map(|(a, b)| (1.0 - s) * a + s * b).collect();
        (1.0 - s) * h0 + s * h1 + output_entropy(&q)
    };
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..60 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
    }
    let s = 0.5 * (lo + hi);
    let mut cand: Vec<f64> = mu.iter().map(|m| (1.0 - s) * m).collect();
    entering.iter().for_each(|&j| cand[j] += s * share);
    let r = sparse_information(w, neg_h, &cand);
    // near the optimum the gain is below rounding; still bring the inputs in
    (s > 0.0 && r >= rate - flat(rate)).then_some((cand, r.max(rate)))
}

pub fn capacity_at_lag(w: &ChannelMatrix, k: u64, tol: f64, max_iter: usize) -> Result<CapacityResult> {
    if k == 1 {
        return capacity(w, tol, max_iter);
    }
    capacity(&w.power(k)?, tol, max_iter)
}

pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Memory of the system at resolution `n_states`.
pub fn memory_of_system(
    map: &MapSpec,
    kernel: &NoiseKernel,
    n_states: usize,
    tol: f64,
) -> Result<CapacityResult> {
    if n_states < 2 {
        return Err(Error::InvalidArgument("n_states must be at least 2".into()));
    }
    capacity(&channel_matrix(map, kernel, n_states, DEFAULT_QUAD_ORDER)?, tol, DEFAULT_MAX_ITER)
}

/// Number of states used for a given noise width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResolutionRule {
    pub bins_per_epsilon: f64,
    pub min_states: usize,
}

impl Default for ResolutionRule {
    fn default() -> Self {
        Self { bins_per_epsilon: 16.0, min_states: 64 }
    }
}

impl ResolutionRule {
    pub fn n_states(&self, epsilon: f64) -> usize {
        self.min_states.max((self.bins_per_epsilon / epsilon).ceil() as usize)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingPoint {
    pub epsilon: f64,
    pub n_states: usize,
    pub capacity_bits: f64,
    pub certified_slack: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingResult {
    /// Least-squares slope of capacity against `log2(1/epsilon)`.
    pub slope: f64,
    pub intercept: f64,
    pub points: Vec<ScalingPoint>,
}

/// Capacities for each noise width; runs the widths in parallel.
pub fn memory_table(
    map: &MapSpec,
    family: KernelFamily,
    boundary: Boundary,
    eps_list: &[f64],
    rule: ResolutionRule,
    tol: f64,
) -> Result<Vec<ScalingPoint>> {
    if eps_list.is_empty() {
        return Err(Error::InvalidArgument("need at least one epsilon".into()));
    }
    if rule.bins_per_epsilon < 8.0 {
        return Err(Error::InvalidArgument("resolution rule must give at least 8 bins per epsilon".into()));
    }
    eps_list
        .par_iter()
        .map(|&epsilon| {
            let kernel = NoiseKernel::new(family, epsilon, boundary)?;
            let n_states = rule.n_states(epsilon);
            let r = memory_of_system(map, &kernel, n_states, tol)?;
            Ok(ScalingPoint {
                epsilon,
                n_states,
                capacity_bits: r.capacity_bits,
                certified_slack: r.certified_slack,
                iterations: r.iterations,
            })
        })
        .collect()
}

/// `(slope, intercept)` of the least-squares line through `(log2(1/eps), capacity)`.
pub fn fit_slope(points: &[ScalingPoint]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("need at least two points".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| (1.0 / p.epsilon).log2()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.capacity_bits).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("epsilon values must differ".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Whether a list of widths is suitable for a slope fit: at least four
/// strictly decreasing values spanning three octaves.
pub fn check_scaling_eps(eps_list: &[f64]) -> Result<()> {
    if eps_list.len() < 4 {
        return Err(Error::InvalidArgument("need at least 4 epsilon values".into()));
    }
    if eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument("epsilon values must be strictly decreasing".into()));
    }
    if (eps_list[0] / eps_list[eps_list.len() - 1]).log2() < 3.0 - 1e-12 {
        return Err(Error::InvalidArgument("epsilon values must span at least 3 octaves".into()));
    }
    Ok(())
}

pub fn memory_scaling(
    map: &MapSpec,
    family: KernelFamily,
    boundary: Boundary,
    eps_list: &[f64],
    rule: ResolutionRule,
    tol: f64,
) -> Result<ScalingResult> {
    check_scaling_eps(eps_list)?;
    let points = memory_table(map, family, boundary, eps_list, rule, tol)?;
    let (slope, intercept) = fit_slope(&points)?;
    Ok(ScalingResult { slope, intercept, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::Builtin;

    fn h2(p: f64) -> f64 {
        -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
    }

    #[test]
    fn mutual_information_examples() {
        let id = ChannelMatrix::identity(16);
        let u = vec![1.0 / 16.0; 16];
        assert!((mutual_information(&u, &id).unwrap() - 4.0).abs() < 1e-12);
        let same = ChannelMatrix::from_rows(&[vec![0.2, 0.8], vec![0.2, 0.8]]).unwrap();
        assert!(mutual_information(&[0.3, 0.7], &same).unwrap().abs() < 1e-12);
        let bsc = ChannelMatrix::binary_symmetric(0.1).unwrap();
        let i = mutual_information(&[0.5, 0.5], &bsc).unwrap();
        assert!((i - (1.0 - h2(0.1))).abs() < 1e-12);
        assert!(mutual_information(&[1.0], &bsc).is_err());
    }

    #[test]
    fn capacity_examples() {
        let bsc = ChannelMatrix::binary_symmetric(0.1).unwrap();
        let r = capacity(&bsc, 1e-9, 1000).unwrap();
        assert!((r.capacity_bits - 0.53100).abs() < 1e-5);
        assert!((r.input_distribution[0] - 0.5).abs() < 1e-9);
        let r = capacity(&ChannelMatrix::identity(4), 1e-9, 10).unwrap();
        assert!((r.capacity_bits - 2.0).abs() < 1e-12);
        let r = capacity_at_lag(&bsc, 2, 1e-9, 1000).unwrap();
        assert!((r.capacity_bits - 0.319923).abs() < 1e-5);
        assert!((r.capacity_bits - (1.0 - h2(0.18))).abs() < 1e-9);
    }

    #[test]
    fn asymmetric_channel_ascends_monotonically() {
        // Z-channel: capacity log2(1 + (1-p) p^(p/(1-p)))
        let p: f64 = 0.3;
        let z = ChannelMatrix::from_rows(&[vec![1.0, 0.0], vec![p, 1.0 - p]]).unwrap();
        let r = capacity(&z, 1e-10, 10_000).unwrap();
        let exact = (1.0 + (1.0 - p) * p.powf(p / (1.0 - p))).log2();
        assert!((r.capacity_bits - exact).abs() < 1e-9);
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert!(r.iterations > 0);
        assert!(r.certified_slack <= 1e-10);
    }

    #[test]
    fn non_convergence_reports_slack() {
        let z = ChannelMatrix::from_rows(&[vec![1.0, 0.0], vec![0.3, 0.7]]).unwrap();
        match capacity(&z, 1e-14, 1) {
            Err(Error::NotConverged { iterations, residual }) => {
                assert_eq!(iterations, 1);
                assert!(residual > 0.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flat_kernel_gives_uniform_rows() {
        let k = NoiseKernel::uniform_ball(0.5, Boundary::Wrap).unwrap();
        let w = channel_matrix(&MapSpec::logistic(4.0), &k, 32, 8).unwrap();
        for i in 0..32 {
            assert!(w.row(i).iter().all(|v| (v - 1.0 / 32.0).abs() < 1e-12));
        }
        let r = memory_of_system(&MapSpec::builtin(Builtin::Doubling), &k, 32, 1e-9).unwrap();
        assert!(r.capacity_bits.abs() < 1e-9);
    }

    #[test]
    fn identity_map_closed_form() {
        let k = NoiseKernel::uniform_ball(0.125, Boundary::Wrap).unwrap();
        let r = memory_of_system(&MapSpec::builtin(Builtin::Identity), &k, 512, 1e-6).unwrap();
        assert!((r.capacity_bits - 2.0).abs() < 0.02, "{}", r.capacity_bits);
    }

    #[test]
    fn slope_fit_is_exact_on_a_line() {
        let pts: Vec<ScalingPoint> = (3..7)
            .map(|k| ScalingPoint {
                epsilon: (0.5f64).powi(k),
                n_states: 0,
                capacity_bits: 0.5 * k as f64 + 1.0,
                certified_slack: 0.0,
                iterations: 0,
            })
            .collect();
        let (s, b) = fit_slope(&pts).unwrap();
        assert!((s - 0.5).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        assert!(check_scaling_eps(&[0.5, 0.25, 0.125]).is_err());
        assert!(check_scaling_eps(&[0.5, 0.25, 0.125, 0.1]).is_err());
        assert!(check_scaling_eps(&[0.5, 0.25, 0.125, 0.0625]).is_ok());
    }
}
