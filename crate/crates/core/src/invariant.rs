//! Stationary measures and everything derived from them.

use log::{debug, warn};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dot, l1_distance, l2_norm, Matrix};
use crate::maps::MapSpec;
use crate::noise::NoiseKernel;
use crate::quad::GaussLegendre;
use crate::transfer::{build_ulam, density_norm, Density, GridDensity, Representation, TransferMatrix};

/// Entries at or below this are treated as structural zeros in the support graph.
pub const SUPPORT_FLOOR: f64 = 1e-14;
/// Half-width of the interval excluded around each non-smooth point of the map.
pub const LYAPUNOV_EXCLUSION: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct StationaryResult {
    pub density: Density,
    /// `||P rho - rho||_1` in the density's representation.
    pub residual: f64,
    pub iterations: usize,
    pub gap_estimate: Option<f64>,
}

/// Iterates `rho <- P rho` until `||P rho - rho||_1 <= tol`.
pub fn power_iterate(
    p: &TransferMatrix,
    init: &Density,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let rep = p.representation;
    if init.representation() != rep {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: init.as_slice().len() });
    }
    let mut rho = init.as_slice().to_vec();
    let mut next = p.apply_raw(&rho)?;
    let mut residual = residual_of(rep, &rho, &next);
    let mut iterations = 0;
    while residual > tol {
        if iterations >= max_iter {
            return Err(Error::NotConverged { iterations, residual });
        }
        rho = next;
        next = p.apply_raw(&rho)?;
        residual = residual_of(rep, &rho, &next);
        iterations += 1;
    }
    if let Representation::Ulam { .. } = rep {
        for v in rho.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let s: f64 = rho.iter().sum();
        rho.iter_mut().for_each(|v| *v /= s);
    }
    Ok(StationaryResult {
        density: Density::from_raw(rep, rho),
        residual,
        iterations,
        gap_estimate: None,
    })
}

fn residual_of(rep: Representation, a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    density_norm(rep, &diff)
}

/// Stationary density from the uniform start.
pub fn stationary(p: &TransferMatrix, tol: f64, max_iter: usize) -> Result<StationaryResult> {
    power_iterate(p, &Density::uniform(p.representation), tol, max_iter)
}

/// Recomputes `||P rho - rho||_1` from scratch.
pub fn stationarity_residual(p: &TransferMatrix, rho: &Density) -> Result<f64> {
    let next = p.matrix.mul_vec(rho.as_slice())?;
    Ok(residual_of(p.representation, rho.as_slice(), &next))
}

/// Ulam stationary density at `n_bins`, with its discretization error
/// estimated by refinement: the L1 distance between the `n_bins` solution
/// and the `2 n_bins` solution coarsened back onto `n_bins` bins.
pub fn ulam_stationary_with_bound(
    map: &MapSpec,
    kernel: &NoiseKernel,
    n_bins: usize,
    quad_order: usize,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryResult> {
    let coarse = stationary(&build_ulam(map, kernel, n_bins, quad_order)?, tol, max_iter)?;
    let fine = stationary(&build_ulam(map, kernel, 2 * n_bins, quad_order)?, tol, max_iter)?;
    let fine_coarsened: Vec<f64> = fine.density.as_slice().chunks(2).map(|c| c[0] + c[1]).collect();
    let bound = l1_distance(coarse.density.as_slice(), &fine_coarsened) + 2.0 * tol;
    let mut out = coarse;
    out.density.set_discretization_error(bound);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Spectral gap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GapEstimate {
    pub gap: f64,
    /// Modulus of the second eigenvalue.
    pub lambda2: f64,
    pub iterations: usize,
    /// False when the Ritz values never settled and `lambda2` is the
    /// asymptotic growth rate of the iterates instead (see
    /// [`deflated_spectral_radius`]).
    pub converged: bool,
    /// Spread of the Ritz estimates over the final window.
    pub spread: f64,
}

const GAP_BLOCK: usize = 4;
/// Iterations after which wandering Ritz values trigger the growth-rate fallback.
const GAP_STALL: usize = 2000;

/// `1 - |lambda_2|` by block power iteration on the complement of the
/// stationary direction, with Rayleigh–Ritz values read off every step.
pub fn spectral_gap(p: &TransferMatrix, tol: f64) -> Result<f64> {
    Ok(spectral_gap_detailed(p, tol, 20_000)?.gap)
}

pub fn spectral_gap_detailed(p: &TransferMatrix, tol: f64, max_iter: usize) -> Result<GapEstimate> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let pi = match stationary(p, (tol * 1e-3).max(1e-14), 1_000_000) {
        Ok(r) => r.density.as_slice().to_vec(),
        // reducible or periodic chains: any normalized fixed-point candidate
        // still spans a unit eigendirection; fall back to the uniform start
        Err(_) => Density::uniform(p.representation).as_slice().to_vec(),
    };
    let r = deflated_spectral_radius(&p.matrix, &pi, &p.mass_functional(), tol, max_iter)?;
    Ok(GapEstimate {
        gap: (1.0 - r.radius).clamp(0.0, 1.0),
        lambda2: r.radius,
        iterations: r.iterations,
        converged: r.converged,
        spread: r.spread,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct RadiusEstimate {
    pub radius: f64,
    pub iterations: usize,
    pub converged: bool,
    pub spread: f64,
}

/// Spectral radius of `A` restricted to `{v : left . v = 0}`, where `right`
/// and `left` are the right and left unit eigenvectors.
///
/// Runs subspace iteration with a block of four vectors and stops when the
/// largest Ritz modulus varies by at most `tol / 10` over ten steps. Strongly
/// non-normal operators with a tiny, clustered non-unit spectrum (the tent
/// map, doubling with periodic noise) have Ritz values that keep wandering
/// inside the pseudospectrum at the rounding level; if they still vary by
/// more than 1e-8 after 2000 steps, the radius is taken as the mean
/// one-step growth of the leading iterate over the second half of the run
/// and `converged` is false. Those eigenvalues are ill-conditioned, so the
/// estimate is only good to their conditioning (a few 1e-5 absolute on the
/// tested maps, where `|lambda_2|` itself is below 1e-3).
pub fn deflated_spectral_radius(
    a: &Matrix,
    right: &[f64],
    left: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<RadiusEstimate> {
    let n = a.rows();
    if n <= 1 {
        return Ok(RadiusEstimate { radius: 0.0, iterations: 0, converged: true, spread: 0.0 });
    }
    let s = GAP_BLOCK.min(n - 1);
    let lr = dot(left, right);
    let project = |v: &mut [f64]| {
        let c = dot(left, v) / lr;
        v.iter_mut().zip(right).for_each(|(x, r)| *x -= c * r);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let random_vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        project(&mut v);
        v
    };
    let mut basis: Vec<Vec<f64>> = (0..s).map(|_| random_vec(&mut rng)).collect();
    orthonormalize(&mut basis, &mut || random_vec(&mut rng), &project);
    // basis vectors whose pre-normalization norm fell to the rounding floor
    // carry no spectral information and are kept out of the Ritz matrix
    let mut active = vec![true; s];

    let spread_of = |w: &[f64]| {
        w.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) - w.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    };
    let mut history: Vec<f64> = Vec::new();
    let mut log_growth: Vec<f64> = Vec::new();
    let mut images = vec![vec![0.0; n]; s];
    for it in 1..=max_iter {
        for (v, w) in basis.iter().zip(images.iter_mut()) {
            a.mul_vec_into(v, w);
            project(w);
        }
        let idx: Vec<usize> = (0..s).filter(|&k| active[k]).collect();
        let h: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| idx.iter().map(|&j| dot(&basis[i], &images[j])).collect())
            .collect();
        let radius = if h.is_empty() { 0.0 } else { small_spectral_radius(&h) };
        history.push(radius);
        std::mem::swap(&mut basis, &mut images);
        let norms = orthonormalize(&mut basis, &mut || random_vec(&mut rng), &project);
        log_growth.push(if norms[0] > 0.0 { norms[0].ln() } else { f64::NEG_INFINITY });
        let top = norms.iter().copied().fold(0.0, f64::max);
        for k in 0..s {
            active[k] = norms[k] > 1e-6 * top;
        }
        if it >= 20 {
            let spread = spread_of(&history[history.len() - 10..]);
            if spread <= 0.1 * tol {
                return Ok(RadiusEstimate { radius: radius.min(1.0), iterations: it, converged: true, spread });
            }
        }
        if it == GAP_STALL {
            let spread = spread_of(&history[history.len() - 200..]);
            if spread > 1e-8 {
                let tail = &log_growth[it / 2..];
                let rate = (tail.iter().sum::<f64>() / tail.len() as f64).exp();
                warn!("Ritz values did not settle (spread {spread:e}); using growth rate {rate:e}");
                return Ok(RadiusEstimate { radius: rate.min(1.0), iterations: it, converged: false, spread });
            }
        }
    }
    Err(Error::NotConverged { iterations: max_iter, residual: spread_of(&history[history.len().saturating_sub(10)..]) })
}

/// Modified Gram–Schmidt; collapsed vectors are replaced by fresh ones.
/// Returns each vector's norm before normalization (0 if it was replaced).
fn orthonormalize(
    basis: &mut [Vec<f64>],
    fresh: &mut dyn FnMut() -> Vec<f64>,
    project: &dyn Fn(&mut [f64]),
) -> Vec<f64> {
    let mut norms = vec![0.0; basis.len()];
    for i in 0..basis.len() {
        for attempt in 0..8 {
            project(&mut basis[i]);
            let (head, tail) = basis.split_at_mut(i);
            for q in head.iter() {
                let c = dot(q, &tail[0]);
                tail[0].iter_mut().zip(q).for_each(|(x, qv)| *x -= c * qv);
            }
            let norm = l2_norm(&basis[i]);
            if norm > 1e-12 || (attempt > 0 && norm > 0.0) {
                basis[i].iter_mut().for_each(|x| *x /= norm);
                if attempt == 0 {
                    norms[i] = norm;
                }
                break;
            }
            basis[i] = fresh();
        }
    }
    norms
}

/// Largest eigenvalue modulus of a small dense matrix.
fn small_spectral_radius(h: &[Vec<f64>]) -> f64 {
    small_eigenvalues(h).iter().map(|&(re, im)| re.hypot(im)).fold(0.0, f64::max)
}

/// Eigenvalues `(re, im)` of a small dense matrix: Householder reduction to
/// Hessenberg form followed by the Francis double-shift QR iteration.
pub fn small_eigenvalues(h: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let mut a: Vec<Vec<f64>> = h.to_vec();
    hessenberg(&mut a);
    hqr(&mut a)
}

fn hessenberg(a: &mut [Vec<f64>]) {
    let n = a.len();
    for k in 0..n.saturating_sub(2) {
        let mut v: Vec<f64> = (k + 1..n).map(|i| a[i][k]).collect();
        let norm = l2_norm(&v);
        if norm == 0.0 {
            continue;
        }
        let alpha = if v[0] > 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vn = l2_norm(&v);
        if vn == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vn);
        // A <- (I - 2vv^T) A
        for j in 0..n {
            let s: f64 = (k + 1..n).map(|i| v[i - k - 1] * a[i][j]).sum();
            for i in k + 1..n {
                a[i][j] -= 2.0 * v[i - k - 1] * s;
            }
        }
        // A <- A (I - 2vv^T)
        for row in a.iter_mut() {
            let s: f64 = (k + 1..n).map(|j| row[j] * v[j - k - 1]).sum();
            for j in k + 1..n {
                row[j] -= 2.0 * s * v[j - k - 1];
            }
        }
    }
}

fn hqr(a: &mut [Vec<f64>]) -> Vec<(f64, f64)> {
    let n = a.len();
    let sign = |a: f64, b: f64| if b >= 0.0 { a.abs() } else { -a.abs() };
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];
    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[i][j].abs();
        }
    }
    let mut nn = n as isize - 1;
    let mut t = 0.0;
    while nn >= 0 {
        let mut its = 0;
        loop {
            let nu = nn as usize;
            let mut l = nu;
            while l >= 1 {
                let mut s = a[l - 1][l - 1].abs() + a[l][l].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[l][l - 1].abs() + s == s {
                    a[l][l - 1] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a[nu][nu];
            if l == nu {
                wr[nu] = x + t;
                wi[nu] = 0.0;
                nn -= 1;
                break;
            }
            let mut y = a[nu - 1][nu - 1];
            let mut w = a[nu][nu - 1] * a[nu - 1][nu];
            if l == nu - 1 {
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let mut z = q.abs().sqrt();
                x += t;
                if q >= 0.0 {
                    z = p + sign(z, p);
                    wr[nu - 1] = x + z;
                    wr[nu] = if z != 0.0 { x - w / z } else { x + z };
                    wi[nu - 1] = 0.0;
                    wi[nu] = 0.0;
                } else {
                    wr[nu - 1] = x + p;
                    wr[nu] = x + p;
                    wi[nu - 1] = -z;
                    wi[nu] = z;
                }
                nn -= 2;
                break;
            }
            if its == 60 {
                // give up on this block: report its diagonal
                for i in l..=nu {
                    wr[i] = a[i][i] + t;
                    wi[i] = 0.0;
                }
                nn = l as isize - 1;
                break;
            }
            if its == 10 || its == 20 {
                t += x;
                for i in 0..=nu {
                    a[i][i] -= x;
                }
                let s = a[nu][nu - 1].abs() + a[nu - 1][nu - 2].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;
            let (mut p, mut q, mut r);
            let mut m = nu - 2;
            loop {
                let z = a[m][m];
                let r0 = x - z;
                let s0 = y - z;
                p = (r0 * s0 - w) / a[m + 1][m] + a[m][m + 1];
                q = a[m + 1][m + 1] - z - r0 - s0;
                r = a[m + 2][m + 1];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a[m][m - 1].abs() * (q.abs() + r.abs());
                let v = p.abs() * (a[m - 1][m - 1].abs() + z.abs() + a[m + 1][m + 1].abs());
                if u + v == v {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                a[i][i - 2] = 0.0;
                if i != m + 2 {
                    a[i][i - 3] = 0.0;
                }
            }
            let mut k = m;
            while k < nu {
                if k != m {
                    p = a[k][k - 1];
                    q = a[k + 1][k - 1];
                    r = if k != nu - 1 { a[k + 2][k - 1] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = sign((p * p + q * q + r * r).sqrt(), p);
                if s != 0.0 {
                    if k == m {
                        if l != m {
                            a[k][k - 1] = -a[k][k - 1];
                        }
                    } else {
                        a[k][k - 1] = -s * x;
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    let z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nu {
                        let mut pp = a[k][j] + q * a[k + 1][j];
                        if k != nu - 1 {
                            pp += r * a[k + 2][j];
                            a[k + 2][j] -= pp * z;
                        }
                        a[k + 1][j] -= pp * y;
                        a[k][j] -= pp * x;
                    }
                    let mmin = if nu < k + 3 { nu } else { k + 3 };
                    for i in l..=mmin {
                        let mut pp = x * a[i][k] + y * a[i][k + 1];
                        if k != nu - 1 {
                            pp += z * a[i][k + 2];
                            a[i][k + 2] -= pp * r;
                        }
                        a[i][k + 1] -= pp * q;
                        a[i][k] -= pp;
                    }
                }
                k += 1;
            }
        }
    }
    wr.into_iter().zip(wi).collect()
}

// ---------------------------------------------------------------------------
// Doeblin bound
// ---------------------------------------------------------------------------

/// Minimum pairwise overlap `∫ min(q(T x, .), q(T x', .))` over a grid of
/// `grid` starting points (endpoints included).
pub fn doeblin_lower_bound(map: &MapSpec, kernel: &NoiseKernel, grid: usize) -> Result<f64> {
    if grid < 2 {
        return Err(Error::InvalidArgument("grid must have at least 2 points".into()));
    }
    let mut centers: Vec<f64> = (0..grid)
        .map(|i| map.eval(i as f64 / (grid - 1) as f64))
        .collect::<Result<_>>()?;
    centers.sort_by(f64::total_cmp);
    centers.dedup_by(|a, b| (*a - *b).abs() < 1e-15);

    // composite Gauss–Legendre on a fine uniform mesh of [0,1]
    let gl = GaussLegendre::new(8);
    let panels = 512;
    let nodes: Vec<(f64, f64)> = (0..panels)
        .flat_map(|p| {
            let lo = p as f64 / panels as f64;
            gl.on(lo, lo + 1.0 / panels as f64).collect::<Vec<_>>()
        })
        .collect();
    let densities: Vec<Vec<f64>> = centers
        .par_iter()
        .map(|&c| nodes.iter().map(|&(y, _)| kernel.density(c, y)).collect())
        .collect();
    let min = (0..centers.len())
        .into_par_iter()
        .map(|i| {
            (i + 1..centers.len())
                .map(|j| {
                    nodes
                        .iter()
                        .enumerate()
                        .map(|(k, &(_, w))| w * densities[i][k].min(densities[j][k]))
                        .sum::<f64>()
                })
                .fold(1.0, f64::min)
        })
        .reduce(|| 1.0, f64::min);
    Ok(min.clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Ergodic decomposition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ErgodicComponent {
    /// Sorted bin indices of the closed class.
    pub states: Vec<usize>,
    /// Stationary density of the chain restricted to the class, embedded in
    /// the full grid.
    pub density: GridDensity,
    pub residual: f64,
}

impl ErgodicComponent {
    /// `[left edge of first bin, right edge of last bin]`.
    pub fn hull(&self) -> (f64, f64) {
        let n = self.density.n_bins() as f64;
        let first = *self.states.first().expect("non-empty component");
        let last = *self.states.last().expect("non-empty component");
        (first as f64 / n, (last + 1) as f64 / n)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ErgodicDecomposition {
    pub components: Vec<ErgodicComponent>,
    pub threshold: f64,
}

/// Strongly connected components of a directed graph given as adjacency
/// lists, by an iterative Tarjan. Components come out in reverse topological
/// order.
pub fn strongly_connected_components(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut comps = Vec::new();
    let mut counter = 0;
    let mut call: Vec<(usize, usize)> = Vec::new();
    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        call.push((root, 0));
        while let Some(&mut (v, ref mut next)) = call.last_mut() {
            if *next == 0 {
                index[v] = counter;
                low[v] = counter;
                counter += 1;
                stack.push(v);
                on_stack[v] = true;
            }
            if *next < adj[v].len() {
                let w = adj[v][*next];
                *next += 1;
                if index[w] == usize::MAX {
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comp.sort_unstable();
                comps.push(comp);
            }
        }
    }
    comps
}

/// Support graph `i -> j` iff `P[j][i] > max(threshold, SUPPORT_FLOOR)`.
pub fn support_graph(p: &Matrix, threshold: f64) -> Vec<Vec<usize>> {
    let cut = threshold.max(SUPPORT_FLOOR);
    let n = p.rows();
    let mut adj = vec![Vec::new(); n];
    for j in 0..n {
        for (i, &v) in p.row(j).iter().enumerate() {
            if v > cut {
                adj[i].push(j);
            }
        }
    }
    adj
}

/// Closed communicating classes of the thresholded support graph, each with
/// its own stationary density.
pub fn ergodic_components(p: &TransferMatrix, support_threshold: f64) -> Result<ErgodicDecomposition> {
    if !matches!(p.representation, Representation::Ulam { .. }) {
        return Err(Error::InvalidArgument("ergodic decomposition needs an Ulam matrix".into()));
    }
    if !(support_threshold >= 0.0) {
        return Err(Error::InvalidArgument("support threshold must be nonnegative".into()));
    }
    let n = p.dim();
    let adj = support_graph(&p.matrix, support_threshold);
    let comps = strongly_connected_components(&adj);
    let mut comp_of = vec![0; n];
    for (c, states) in comps.iter().enumerate() {
        for &s in states {
            comp_of[s] = c;
        }
    }
    let mut components = Vec::new();
    for (c, states) in comps.iter().enumerate() {
        let closed = states.iter().all(|&i| adj[i].iter().all(|&j| comp_of[j] == c));
        if !closed {
            continue;
        }
        let k = states.len();
        let mut sub = Matrix::zeros(k, k);
        for (a, &j) in states.iter().enumerate() {
            for (b, &i) in states.iter().enumerate() {
                sub[(a, b)] = p.matrix[(j, i)];
            }
        }
        // renormalize columns: leakage below the threshold is dropped
        let sums = sub.column_sums();
        for a in 0..k {
            for b in 0..k {
                sub[(a, b)] /= sums[b];
            }
        }
        let sub_tm = TransferMatrix::from_stochastic(sub)?;
        let res = stationary(&sub_tm, 1e-10, 2_000_000)?;
        let mut masses = vec![0.0; n];
        for (a, &i) in states.iter().enumerate() {
            masses[i] = res.density.as_slice()[a];
        }
        components.push(ErgodicComponent {
            states: states.clone(),
            density: GridDensity { masses, discretization_error: 0.0 },
            residual: res.residual,
        });
    }
    components.sort_by_key(|c| c.states[0]);
    Ok(ErgodicDecomposition { components, threshold: support_threshold })
}

// ---------------------------------------------------------------------------
// Measure queries
// ---------------------------------------------------------------------------

/// Rational approximation `A` of `mu[a, b]` with `|A - mu_rho[a, b]| <= delta/4`,
/// where `mu_rho` integrates the stored density exactly. Fails when the
/// density's recorded discretization error exceeds `delta / 2`.
pub fn measure_query(
    rho: &Density,
    a: &BigRational,
    b: &BigRational,
    delta: &BigRational,
) -> Result<BigRational> {
    let zero = BigRational::zero();
    let one = BigRational::one();
    if !(a >= &zero && a < b && b <= &one) {
        return Err(Error::InvalidArgument("need 0 <= a < b <= 1".into()));
    }
    if delta <= &zero {
        return Err(Error::InvalidArgument("delta must be positive".into()));
    }
    let af = a.to_f64().expect("rational in [0,1]");
    let bf = b.to_f64().expect("rational in [0,1]");
    let df = delta.to_f64().unwrap_or(f64::MAX);
    let bound = rho.discretization_error();
    if bound > df / 2.0 {
        return Err(Error::ResolutionTooCoarse { bound, delta: df });
    }
    let mass = rho.mass_on(af, bf).clamp(0.0, 1.0);
    // round to the dyadic grid 2^-k with 2^-k <= delta/2
    let mut k: u32 = 1;
    while (0.5f64).powi(k as i32) > df / 2.0 && k < 1000 {
        k += 1;
    }
    let k = k.min(60);
    let scale = (1u64 << k) as f64;
    let numer = (mass * scale).round() as i64;
    Ok(BigRational::new(BigInt::from(numer), BigInt::from(1u64 << k)))
}

// ---------------------------------------------------------------------------
// Mixing time
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct MixingTime {
    /// Smallest `t` with `TV(P^t e_i, P^t e_j) <= target` for the extreme pair.
    pub steps: u64,
    /// The basis pair `(i, j)` maximizing the one-step separation.
    pub pair: (usize, usize),
    /// `ln(1/target) / gap`, when a gap is supplied.
    pub gap_estimate: Option<f64>,
}

/// Basis pair whose one-step images are furthest apart in L1.
pub fn extreme_pair(p: &Matrix) -> (usize, usize) {
    let n = p.rows();
    let cols: Vec<Vec<f64>> = (0..n).map(|i| p.column(i)).collect();
    let best = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = (f64::NEG_INFINITY, i, i);
            for j in i + 1..n {
                let d = l1_distance(&cols[i], &cols[j]);
                if d > best.0 {
                    best = (d, i, j);
                }
            }
            best
        })
        .reduce(
            || (f64::NEG_INFINITY, 0, 0),
            |a, b| if b.0 > a.0 || (b.0 == a.0 && (b.1, b.2) < (a.1, a.2)) { b } else { a },
        );
    (best.1, best.2)
}

const MAX_DOUBLINGS: u32 = 48;

/// Distance used to decide that two starts have merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixingNorm {
    /// Half the L1 distance.
    #[default]
    TotalVariation,
    L1,
}

/// Mixing time in total variation between the two extreme basis starts.
pub fn mixing_time(p: &TransferMatrix, target: f64, gap: Option<f64>) -> Result<MixingTime> {
    mixing_time_in(p, target, MixingNorm::TotalVariation, gap)
}

/// Smallest `t` with `dist(P^t e_i, P^t e_j) <= target` for the extreme pair.
/// Uses doubling search over `P^(2^k)` followed by bisection; the distance is
/// non-increasing in `t`, so both are exact.
pub fn mixing_time_in(p: &TransferMatrix, target: f64, norm: MixingNorm, gap: Option<f64>) -> Result<MixingTime> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidArgument("target must lie in (0, 1)".into()));
    }
    if !matches!(p.representation, Representation::Ulam { .. }) {
        return Err(Error::InvalidArgument("mixing time needs a stochastic matrix".into()));
    }
    let n = p.dim();
    let decomposition = ergodic_components(p, 0.0)?;
    if decomposition.components.len() > 1 {
        return Err(Error::NotMixing(format!(
            "{} closed classes in the support graph",
            decomposition.components.len()
        )));
    }
    let (i, j) = extreme_pair(&p.matrix);
    let mut diff = vec![0.0; n];
    diff[i] += 1.0;
    diff[j] -= 1.0;
    let factor = match norm {
        MixingNorm::TotalVariation => 0.5,
        MixingNorm::L1 => 1.0,
    };
    let tv = |v: &[f64]| factor * v.iter().map(|x| x.abs()).sum::<f64>();
    let gap_estimate = gap.filter(|g| *g > 0.0).map(|g| (1.0 / target).ln() / g);
    if tv(&diff) <= target {
        return Ok(MixingTime { steps: 0, pair: (i, j), gap_estimate });
    }
    // powers[k] = P^(2^k)
    let mut powers = vec![p.matrix.clone()];
    let mut at = p.matrix.mul_vec(&diff)?;
    let mut k = 0u32;
    while tv(&at) > target {
        k += 1;
        if k > MAX_DOUBLINGS {
            return Err(Error::NotMixing(format!("no mixing within 2^{MAX_DOUBLINGS} steps")));
        }
        let last = powers.last().expect("non-empty");
        let sq = last.matmul(last);
        at = sq.mul_vec(&diff)?;
        powers.push(sq);
    }
    // answer in (2^(k-1), 2^k]; bisect on t = 2^(k-1) + offset
    let (mut lo, mut hi) = if k == 0 { (0u64, 1u64) } else { (1u64 << (k - 1), 1u64 << k) };
    let apply_power = |t: u64| -> Vec<f64> {
        let mut v = diff.clone();
        for (bit, m) in powers.iter().enumerate() {
            if t >> bit & 1 == 1 {
                v = m.mul_vec(&v).expect("square");
            }
        }
        v
    };
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if tv(&apply_power(mid)) <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    debug!("mixing time {hi} for pair ({i}, {j})");
    Ok(MixingTime { steps: hi, pair: (i, j), gap_estimate })
}

// ---------------------------------------------------------------------------
// Lyapunov exponent
// ---------------------------------------------------------------------------

/// A probability density on [0,1] that can be evaluated pointwise.
pub trait DensityFn: Sync {
    fn pdf(&self, x: f64) -> f64;
    /// Points where the density may be non-smooth.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

impl DensityFn for Density {
    fn pdf(&self, x: f64) -> f64 {
        Density::pdf(self, x)
    }
    fn breakpoints(&self) -> Vec<f64> {
        Density::breakpoints(self)
    }
}

/// Adapter for closed-form densities.
pub struct FnDensity<F>(pub F);

impl<F: Fn(f64) -> f64 + Sync> DensityFn for FnDensity<F> {
    fn pdf(&self, x: f64) -> f64 {
        (self.0)(x)
    }
}

/// `∫ ln|T'(x)| rho(x) dx` in nats.
///
/// The domain is split at the map's special points (kinks, jumps, critical
/// points) and at the density's breakpoints. Sub-intervals touching a special
/// point or an endpoint of [0,1] are graded geometrically toward it, and an
/// interval of half-width [`LYAPUNOV_EXCLUSION`] around each such point is
/// dropped; for a density bounded by `B` near a point the dropped
/// contribution is at most about `2e-8 * B * |ln|T'||`.
pub fn lyapunov_exponent<D: DensityFn + ?Sized>(map: &MapSpec, rho: &D, quad_order: usize) -> Result<f64> {
    if quad_order < 2 {
        return Err(Error::InvalidArgument("quad_order must be at least 2".into()));
    }
    let gl = GaussLegendre::new(quad_order);
    let special = map.special_points();
    let mut singular: Vec<f64> = vec![0.0, 1.0];
    singular.extend(&special);
    let mut cuts = singular.clone();
    cuts.extend(rho.breakpoints());
    cuts.retain(|x| (0.0..=1.0).contains(x));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let is_singular = |x: f64| singular.iter().any(|s| (s - x).abs() < 1e-15);
    let nearest_singular = |x: f64| singular.iter().map(|s| (s - x).abs()).fold(f64::INFINITY, f64::min);

    let integrand = |x: f64| -> Result<f64> {
        let d = rho.pdf(x);
        if d == 0.0 {
            return Ok(0.0);
        }
        let h = (0.5 * nearest_singular(x)).min(1e-6);
        let deriv = map.derivative(x, h)?;
        if deriv.abs() < 1e-300 {
            return Err(Error::SingularIntegrand { x });
        }
        Ok(deriv.abs().ln() * d)
    };

    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mut panels: Vec<(f64, f64)> = Vec::new();
        graded_panels(a, b, is_singular(a), is_singular(b), &mut panels);
        for (lo, hi) in panels {
            if hi <= lo {
                continue;
            }
            for (x, wt) in gl.on(lo, hi) {
                total += wt * integrand(x)?;
            }
        }
    }
    Ok(total)
}

/// Panels covering `[a, b]`, refined geometrically toward each singular
/// end and stopping [`LYAPUNOV_EXCLUSION`] short of it.
fn graded_panels(a: f64, b: f64, sing_a: bool, sing_b: bool, out: &mut Vec<(f64, f64)>) {
    match (sing_a, sing_b) {
        (false, false) => out.push((a, b)),
        (true, true) => {
            let mid = 0.5 * (a + b);
            graded_panels(a, mid, true, false, out);
            graded_panels(mid, b, false, true, out);
        }
        (true, false) => {
            let mut hi = b - a;
            while hi > LYAPUNOV_EXCLUSION {
                let lo = (0.5 * hi).max(LYAPUNOV_EXCLUSION);
                out.push((a + lo, a + hi));
                hi = lo;
            }
        }
        (false, true) => {
            let mut hi = b - a;
            while hi > LYAPUNOV_EXCLUSION {
                let lo = (0.5 * hi).max(LYAPUNOV_EXCLUSION);
                out.push((b - hi, b - lo));
                hi = lo;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::Builtin;
    use crate::noise::Boundary;

    fn two_state(a: f64, b: f64) -> TransferMatrix {
        TransferMatrix::from_stochastic(
            Matrix::from_rows(&[vec![1.0 - a, b], vec![a, 1.0 - b]]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn power_iteration_examples() {
        let id = TransferMatrix::from_stochastic(Matrix::identity(3)).unwrap();
        let init = Density::Grid(GridDensity::new(vec![0.2, 0.3, 0.5]).unwrap());
        let r = power_iterate(&id, &init, 1e-12, 10).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.residual, 0.0);
        assert_eq!(r.density, init);

        let p = two_state(0.25, 0.25);
        let start = Density::Grid(GridDensity::point_mass(2, 0));
        let r = power_iterate(&p, &start, 1e-10, 1000).unwrap();
        assert!((r.density.as_slice()[0] - 0.5).abs() < 1e-10);

        let k = NoiseKernel::gaussian(0.05, Boundary::Wrap).unwrap();
        let d = build_ulam(&MapSpec::builtin(Builtin::Doubling), &k, 256, 8).unwrap();
        let r = stationary(&d, 1e-8, 10_000).unwrap();
        let u = 1.0 / 256.0;
        assert!(r.density.as_slice().iter().map(|m| (m - u).abs()).sum::<f64>() <= 1e-8);
    }

    #[test]
    fn power_iteration_reports_non_convergence() {
        let flip = TransferMatrix::from_stochastic(
            Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let start = Density::Grid(GridDensity::point_mass(2, 0));
        match power_iterate(&flip, &start, 1e-9, 50) {
            Err(Error::NotConverged { iterations, residual }) => {
                assert_eq!(iterations, 50);
                assert_eq!(residual, 2.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gap_closed_forms() {
        let g = spectral_gap(&two_state(0.25, 0.25), 1e-10).unwrap();
        assert!((g - 0.5).abs() < 1e-8, "{g}");
        let g = spectral_gap(&two_state(0.1, 0.3), 1e-10).unwrap();
        assert!((g - 0.4).abs() < 1e-8, "{g}");
        let id = TransferMatrix::from_stochastic(Matrix::identity(5)).unwrap();
        assert!(spectral_gap(&id, 1e-10).unwrap().abs() < 1e-12);
    }

    #[test]
    fn small_radius_handles_complex_pairs() {
        // rotation by 90 degrees scaled by 0.5: eigenvalues ±0.5i
        let h = vec![vec![0.0, -0.5], vec![0.5, 0.0]];
        assert!((small_spectral_radius(&h) - 0.5).abs() < 1e-12);
        let h = vec![vec![0.3, 0.0, 0.0], vec![0.0, -0.7, 0.0], vec![0.0, 0.0, 0.1]];
        assert!((small_spectral_radius(&h) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn small_eigenvalues_match_dense_solver() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=6 {
            for _ in 0..20 {
                let h: Vec<Vec<f64>> =
                    (0..n).map(|_| (0..n).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
                let na = nalgebra::DMatrix::from_fn(n, n, |i, j| h[i][j]);
                let mut want: Vec<f64> = na.complex_eigenvalues().iter().map(|z| z.norm()).collect();
                let mut got: Vec<f64> = small_eigenvalues(&h).iter().map(|&(a, b)| a.hypot(b)).collect();
                want.sort_by(f64::total_cmp);
                got.sort_by(f64::total_cmp);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-10, "{got:?} vs {want:?}");
                }
            }
        }
    }

    #[test]
    fn tarjan_on_small_graphs() {
        // 0 <-> 1 -> 2 <-> 3, 4 isolated
        let adj = vec![vec![1], vec![0, 2], vec![3], vec![2], vec![]];
        let mut comps = strongly_connected_components(&adj);
        comps.sort();
        assert_eq!(comps, vec![vec![0, 1], vec![2, 3], vec![4]]);
    }

    #[test]
    fn reducible_chain_decomposes() {
        // two absorbing blocks and a transient state feeding both
        let m = Matrix::from_rows(&[
            vec![0.5, 0.5, 0.2, 0.0, 0.0],
            vec![0.5, 0.5, 0.2, 0.0, 0.0],
            vec![0.0, 0.0, 0.2, 0.0, 0.0],
            vec![0.0, 0.0, 0.2, 0.9, 0.1],
            vec![0.0, 0.0, 0.2, 0.1, 0.9],
        ])
        .unwrap();
        let tm = TransferMatrix::from_stochastic(m).unwrap();
        let d = ergodic_components(&tm, 0.0).unwrap();
        let sets: Vec<Vec<usize>> = d.components.iter().map(|c| c.states.clone()).collect();
        assert_eq!(sets, vec![vec![0, 1], vec![3, 4]]);
        for c in &d.components {
            assert!(c.residual <= 1e-8);
            assert!((c.density.masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(mixing_time(&tm, 0.1, None), Err(Error::NotMixing(_))));
    }

    #[test]
    fn queries_on_uniform_density() {
        let rho = Density::Grid(GridDensity::uniform(64));
        let r = |n: i64, d: i64| BigRational::new(BigInt::from(n), BigInt::from(d));
        let q = measure_query(&rho, &r(1, 4), &r(3, 4), &r(1, 1000)).unwrap();
        assert!((q.to_f64().unwrap() - 0.5).abs() <= 1e-3);
        let q = measure_query(&rho, &r(0, 1), &r(1, 1), &r(1, 7)).unwrap();
        assert_eq!(q, BigRational::one());
        assert!(measure_query(&rho, &r(1, 2), &r(1, 4), &r(1, 10)).is_err());
        let mut coarse = rho.clone();
        coarse.set_discretization_error(0.1);
        assert!(matches!(
            measure_query(&coarse, &r(0, 1), &r(1, 2), &r(1, 100)),
            Err(Error::ResolutionTooCoarse { .. })
        ));
    }

    #[test]
    fn mixing_time_two_state() {
        let p = two_state(0.25, 0.25);
        let m = mixing_time(&p, (2.0f64).powi(-10), Some(0.5)).unwrap();
        assert_eq!(m.steps, 10);
        let id = TransferMatrix::from_stochastic(Matrix::identity(3)).unwrap();
        assert!(matches!(mixing_time(&id, 0.1, None), Err(Error::NotMixing(_))));
    }

    #[test]
    fn lyapunov_closed_forms() {
        let d = MapSpec::builtin(Builtin::Doubling);
        let u = Density::Grid(GridDensity::uniform(128));
        let l = lyapunov_exponent(&d, &u, 8).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-4, "{l}");
        let id = MapSpec::builtin(Builtin::Identity);
        assert!(lyapunov_exponent(&id, &u, 8).unwrap().abs() < 1e-6);
        let pc = MapSpec::piecewise_const(0.5, 0.25, 0.75);
        assert!(matches!(lyapunov_exponent(&pc, &u, 8), Err(Error::SingularIntegrand { .. })));
    }

    #[test]
    fn doeblin_examples() {
        let id = MapSpec::builtin(Builtin::Identity);
        let wide = NoiseKernel::gaussian(1.0, Boundary::Wrap).unwrap();
        assert!(doeblin_lower_bound(&MapSpec::logistic(4.0), &wide, 32).unwrap() >= 0.5);
        let ball = NoiseKernel::uniform_ball(0.1, Boundary::Renormalize).unwrap();
        assert_eq!(doeblin_lower_bound(&id, &ball, 16).unwrap(), 0.0);
    }
}
