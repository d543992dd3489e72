//! Discretizations of the noisy transfer operator `rho -> P rho`.
//!
//! Two representations are supported:
//!
//! * **Ulam**: `n` equal bins, densities are bin-mass vectors and the matrix
//!   is column-stochastic. Entry `(j, i)` is the probability of landing in
//!   bin `j` when starting uniformly in bin `i`.
//! * **Piecewise polynomial**: `m` equal pieces carrying Legendre expansions
//!   of degree `K`, so a density is a point of `R^D` with `D = m (K + 1)`.
//!   The matrix is the Galerkin projection of the operator. Only Gaussian
//!   kernels are accepted here since the construction relies on the kernel
//!   being analytic.

use std::io::Write;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{l1_norm, MatVec, Matrix};
use crate::maps::MapSpec;
use crate::noise::{Boundary, KernelFamily, NoiseKernel};
use crate::quad::{legendre_all, legendre_integral, GaussLegendre};

pub const DEFAULT_QUAD_ORDER: usize = 8;
/// Quadrature sub-cells per polynomial piece.
pub const DEFAULT_SUBCELLS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Representation {
    Ulam { n_bins: usize },
    PiecewisePoly { pieces: usize, degree: usize },
}

impl Representation {
    pub fn dim(&self) -> usize {
        match *self {
            Representation::Ulam { n_bins } => n_bins,
            Representation::PiecewisePoly { pieces, degree } => pieces * (degree + 1),
        }
    }

    /// Row vector of the "total mass" functional in this representation.
    pub fn mass_functional(&self) -> Vec<f64> {
        match *self {
            Representation::Ulam { n_bins } => vec![1.0; n_bins],
            Representation::PiecewisePoly { pieces, degree } => {
                let w = 1.0 / pieces as f64;
                let mut m = vec![0.0; pieces * (degree + 1)];
                for p in 0..pieces {
                    m[p * (degree + 1)] = w;
                }
                m
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Densities
// ---------------------------------------------------------------------------

/// Probability masses of `n` equal bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub masses: Vec<f64>,
    /// Bound on the L1 distance to the true measure, when known.
    #[serde(default)]
    pub discretization_error: f64,
}

impl GridDensity {
    pub fn new(masses: Vec<f64>) -> Result<Self> {
        if masses.is_empty() {
            return Err(Error::InvalidArgument("density needs at least one bin".into()));
        }
        if masses.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::InvalidArgument("bin masses must be nonnegative".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("bin masses sum to {total}, not 1")));
        }
        Ok(Self { masses, discretization_error: 0.0 })
    }

    /// Normalizes nonnegative weights into a density.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("weights must be nonnegative with positive sum".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { masses: weights, discretization_error: 0.0 })
    }

    pub fn uniform(n_bins: usize) -> Self {
        Self { masses: vec![1.0 / n_bins as f64; n_bins], discretization_error: 0.0 }
    }

    pub fn point_mass(n_bins: usize, bin: usize) -> Self {
        let mut masses = vec![0.0; n_bins];
        masses[bin] = 1.0;
        Self { masses, discretization_error: 0.0 }
    }

    pub fn n_bins(&self) -> usize {
        self.masses.len()
    }

    pub fn bin_width(&self) -> f64 {
        1.0 / self.masses.len() as f64
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let n = self.masses.len() as f64;
        (i as f64 / n, (i + 1) as f64 / n)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let n = self.masses.len();
        let i = ((x * n as f64).floor() as usize).min(n - 1);
        self.masses[i] * n as f64
    }

    /// Mass on `[a, b]`, exact for the piecewise-constant density.
    pub fn mass_on(&self, a: f64, b: f64) -> f64 {
        let (a, b) = (a.max(0.0), b.min(1.0));
        if a >= b {
            return 0.0;
        }
        let n = self.masses.len();
        let nf = n as f64;
        let first = ((a * nf).floor() as usize).min(n - 1);
        let last = ((b * nf).ceil() as usize).clamp(1, n) - 1;
        (first..=last)
            .map(|i| {
                let (l, r) = self.bin_edges(i);
                let overlap = (b.min(r) - a.max(l)).max(0.0);
                if overlap >= r - l {
                    self.masses[i]
                } else {
                    self.masses[i] * overlap * nf
                }
            })
            .sum()
    }
}

/// Legendre expansions of degree `degree` on `pieces` equal pieces.
///
/// On piece `p` the density is `sum_k coeffs[p*(degree+1)+k] * P_k(t)` with
/// `t` the affine image of the piece onto [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewisePolyDensity {
    pub pieces: usize,
    pub degree: usize,
    pub coeffs: Vec<f64>,
    #[serde(default)]
    pub discretization_error: f64,
}

impl PiecewisePolyDensity {
    pub fn new(pieces: usize, degree: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != pieces * (degree + 1) {
            return Err(Error::DimensionMismatch { expected: pieces * (degree + 1), got: coeffs.len() });
        }
        let d = Self { pieces, degree, coeffs, discretization_error: 0.0 };
        let total = d.total_mass();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!("density integrates to {total}, not 1")));
        }
        Ok(d)
    }

    /// The constant density 1.
    pub fn uniform(pieces: usize, degree: usize) -> Self {
        let mut coeffs = vec![0.0; pieces * (degree + 1)];
        for p in 0..pieces {
            coeffs[p * (degree + 1)] = 1.0;
        }
        Self { pieces, degree, coeffs, discretization_error: 0.0 }
    }

    pub fn piece_width(&self) -> f64 {
        1.0 / self.pieces as f64
    }

    fn block(&self, p: usize) -> &[f64] {
        let k = self.degree + 1;
        &self.coeffs[p * k..(p + 1) * k]
    }

    fn locate(&self, x: f64) -> (usize, f64) {
        let m = self.pieces as f64;
        let p = ((x * m).floor() as usize).min(self.pieces - 1);
        let t = 2.0 * (x * m - p as f64) - 1.0;
        (p, t.clamp(-1.0, 1.0))
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (p, t) = self.locate(x);
        let mut basis = vec![0.0; self.degree + 1];
        legendre_all(t, &mut basis);
        self.block(p).iter().zip(&basis).map(|(c, b)| c * b).sum()
    }

    pub fn total_mass(&self) -> f64 {
        let w = self.piece_width();
        (0..self.pieces).map(|p| w * self.block(p)[0]).sum()
    }

    /// Exact integral over `[a, b]`.
    pub fn mass_on(&self, a: f64, b: f64) -> f64 {
        let (a, b) = (a.max(0.0), b.min(1.0));
        if a >= b {
            return 0.0;
        }
        let half_w = 0.5 * self.piece_width();
        let (pa, ta) = self.locate(a);
        let (pb, tb) = self.locate(b);
        let piece_integral = |p: usize, lo: f64, hi: f64| -> f64 {
            self.block(p)
                .iter()
                .enumerate()
                .map(|(k, c)| c * (legendre_integral(k, hi) - legendre_integral(k, lo)))
                .sum::<f64>()
                * half_w
        };
        // b exactly on a breakpoint locates into the next piece at t = -1
        if pa == pb {
            return piece_integral(pa, ta, tb);
        }
        let mut total = piece_integral(pa, ta, 1.0);
        for p in pa + 1..pb {
            total += 2.0 * half_w * self.block(p)[0];
        }
        total + piece_integral(pb, -1.0, tb)
    }

    /// Masses of `n_bins` equal bins.
    pub fn to_grid(&self, n_bins: usize) -> Vec<f64> {
        (0..n_bins)
            .map(|i| self.mass_on(i as f64 / n_bins as f64, (i + 1) as f64 / n_bins as f64))
            .collect()
    }

    /// Minimum of the density over a sampling grid (undershoot check).
    pub fn min_sampled(&self, samples: usize) -> f64 {
        (0..=samples)
            .map(|i| self.eval(i as f64 / samples as f64))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "representation")]
pub enum Density {
    Grid(GridDensity),
    Poly(PiecewisePolyDensity),
}

impl Density {
    pub fn representation(&self) -> Representation {
        match self {
            Density::Grid(g) => Representation::Ulam { n_bins: g.n_bins() },
            Density::Poly(p) => Representation::PiecewisePoly { pieces: p.pieces, degree: p.degree },
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            Density::Grid(g) => &g.masses,
            Density::Poly(p) => &p.coeffs,
        }
    }

    pub fn uniform(rep: Representation) -> Self {
        match rep {
            Representation::Ulam { n_bins } => Density::Grid(GridDensity::uniform(n_bins)),
            Representation::PiecewisePoly { pieces, degree } => {
                Density::Poly(PiecewisePolyDensity::uniform(pieces, degree))
            }
        }
    }

    /// Wraps a raw coefficient vector without validation.
    pub fn from_raw(rep: Representation, values: Vec<f64>) -> Self {
        match rep {
            Representation::Ulam { .. } => {
                Density::Grid(GridDensity { masses: values, discretization_error: 0.0 })
            }
            Representation::PiecewisePoly { pieces, degree } => Density::Poly(PiecewisePolyDensity {
                pieces,
                degree,
                coeffs: values,
                discretization_error: 0.0,
            }),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            Density::Grid(g) => g.pdf(x),
            Density::Poly(p) => p.eval(x),
        }
    }

    pub fn mass_on(&self, a: f64, b: f64) -> f64 {
        match self {
            Density::Grid(g) => g.mass_on(a, b),
            Density::Poly(p) => p.mass_on(a, b),
        }
    }

    pub fn discretization_error(&self) -> f64 {
        match self {
            Density::Grid(g) => g.discretization_error,
            Density::Poly(p) => p.discretization_error,
        }
    }

    pub fn set_discretization_error(&mut self, e: f64) {
        match self {
            Density::Grid(g) => g.discretization_error = e,
            Density::Poly(p) => p.discretization_error = e,
        }
    }

    /// Points where the density may jump (bin edges or piece breakpoints).
    pub fn breakpoints(&self) -> Vec<f64> {
        let n = match self {
            Density::Grid(g) => g.n_bins(),
            Density::Poly(p) => p.pieces,
        };
        (0..=n).map(|i| i as f64 / n as f64).collect()
    }

    /// Bin masses on an `n`-bin grid.
    pub fn to_grid(&self, n_bins: usize) -> Vec<f64> {
        match self {
            Density::Grid(g) if g.n_bins() == n_bins => g.masses.clone(),
            _ => (0..n_bins)
                .map(|i| self.mass_on(i as f64 / n_bins as f64, (i + 1) as f64 / n_bins as f64))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Matrices
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMetadata {
    pub map: String,
    pub kernel: String,
    pub epsilon: f64,
    pub quad_order: usize,
    /// Non-fatal issues found while building, e.g. discontinuities inside a piece.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TransferMatrix {
    pub matrix: Matrix,
    pub representation: Representation,
    pub metadata: TransferMetadata,
    /// True for the column-stochastic Ulam representation.
    pub stochastic: bool,
}

impl MatVec for TransferMatrix {
    fn dim(&self) -> usize {
        self.matrix.rows()
    }
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.mul_vec_into(x, y)
    }
}

impl TransferMatrix {
    /// Wraps an arbitrary column-stochastic matrix as an Ulam operator.
    pub fn from_stochastic(matrix: Matrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch { expected: matrix.rows(), got: matrix.cols() });
        }
        let n = matrix.rows();
        Ok(Self {
            matrix,
            representation: Representation::Ulam { n_bins: n },
            metadata: TransferMetadata {
                map: "explicit".into(),
                kernel: "explicit".into(),
                epsilon: 0.0,
                quad_order: 0,
                warnings: vec![],
            },
            stochastic: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn mass_functional(&self) -> Vec<f64> {
        self.representation.mass_functional()
    }

    /// Largest deviation of a column sum from 1.
    pub fn max_column_sum_deviation(&self) -> f64 {
        self.matrix.column_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Largest deviation of `m^T P` from `m^T` for the mass functional `m`.
    pub fn mass_drift(&self) -> f64 {
        let m = self.mass_functional();
        self.matrix
            .left_mul_vec(&m)
            .iter()
            .zip(&m)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// One step of the dynamics on a raw coefficient vector, renormalizing
    /// total mass when it drifts by more than 1e-12.
    pub fn apply_raw(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.matrix.mul_vec(v)?;
        let m = self.mass_functional();
        let before: f64 = m.iter().zip(v).map(|(a, b)| a * b).sum();
        let after: f64 = m.iter().zip(&out).map(|(a, b)| a * b).sum();
        if before != 0.0 && ((after - before) / before).abs() > 1e-12 && after != 0.0 {
            debug!("mass drift {:e} renormalized", after - before);
            let s = before / after;
            out.iter_mut().for_each(|x| *x *= s);
        }
        Ok(out)
    }

    pub fn apply(&self, rho: &Density) -> Result<Density> {
        if rho.representation() != self.representation {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: rho.as_slice().len() });
        }
        let out = self.apply_raw(rho.as_slice())?;
        Ok(Density::from_raw(self.representation, out))
    }

    /// Writes the matrix as CSV, row-major, preceded by `#` metadata lines.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let rep = match self.representation {
            Representation::Ulam { n_bins } => format!("ulam n_bins={n_bins}"),
            Representation::PiecewisePoly { pieces, degree } => {
                format!("piecewise-poly pieces={pieces} degree={degree}")
            }
        };
        writeln!(w, "# representation: {rep}")?;
        writeln!(w, "# dim: {}", self.dim())?;
        writeln!(w, "# map: {}", self.metadata.map)?;
        writeln!(w, "# kernel: {}", self.metadata.kernel)?;
        writeln!(w, "# epsilon: {}", self.metadata.epsilon)?;
        writeln!(w, "# quad_order: {}", self.metadata.quad_order)?;
        writeln!(w, "# stochastic: {}", self.stochastic)?;
        for i in 0..self.matrix.rows() {
            let row: Vec<String> = self.matrix.row(i).iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Noiseless images `T(x)` at the Gauss nodes of every cell, with weights
/// normalized to sum to one per cell.
fn cell_images(
    map: &MapSpec,
    cells: usize,
    subcells: usize,
    gl: &GaussLegendre,
) -> Result<Vec<Vec<(f64, f64, f64)>>> {
    let h = 1.0 / cells as f64;
    let sub_h = h / subcells as f64;
    (0..cells)
        .map(|i| {
            let mut nodes = Vec::with_capacity(subcells * gl.order());
            for s in 0..subcells {
                let lo = i as f64 * h + s as f64 * sub_h;
                for (x, w) in gl.on(lo, lo + sub_h) {
                    let x = x.clamp(0.0, 1.0);
                    nodes.push((x, w / h, map.eval(x)?));
                }
            }
            Ok(nodes)
        })
        .collect()
}

/// Bins `[lo, hi)` that can receive mass from center `c`.
fn reachable_bins(kernel: &NoiseKernel, c: f64, n: usize) -> Vec<(usize, usize)> {
    let r = kernel.reach();
    let nf = n as f64;
    let to_bins = |lo: f64, hi: f64| -> (usize, usize) {
        let a = ((lo.max(0.0) * nf).floor() as usize).min(n);
        let b = ((hi.min(1.0) * nf).ceil() as usize).min(n);
        (a, b.max(a))
    };
    if r >= 0.5 {
        return vec![(0, n)];
    }
    match kernel.boundary {
        Boundary::Wrap => {
            let (lo, hi) = (c - r, c + r);
            let mut out = vec![to_bins(lo.max(0.0), hi.min(1.0))];
            if lo < 0.0 {
                out.push(to_bins(1.0 + lo, 1.0));
            }
            if hi > 1.0 {
                out.push(to_bins(0.0, hi - 1.0));
            }
            out
        }
        Boundary::Reflect => vec![to_bins(c - r, c + r)],
        Boundary::Renormalize => {
            let (lo, hi) = (c - r, c + r);
            if hi <= 0.0 || lo >= 1.0 {
                // degenerate uniform ball outside [0,1]; mass() decides
                vec![(0, n)]
            } else {
                vec![to_bins(lo, hi)]
            }
        }
    }
}

/// `out[j] += scale * sum_q w_q * mass(c_q, bin_j)` over the quadrature
/// nodes `(x_q, w_q, c_q = T(x_q))` of one source bin.
fn accumulate_column(kernel: &NoiseKernel, nodes: &[(f64, f64, f64)], scale: f64, out: &mut [f64]) {
    let n = out.len();
    let nf = n as f64;
    for &(_, w, c) in nodes {
        for (a, b) in reachable_bins(kernel, c, n) {
            for (j, slot) in out.iter_mut().enumerate().take(b).skip(a) {
                *slot += scale * w * kernel.mass(c, j as f64 / nf, (j + 1) as f64 / nf);
            }
        }
    }
}

/// Matrix-free Ulam operator: entries are recomputed from the map images and
/// the kernel on every product, so memory stays linear in `n_bins`.
#[derive(Debug, Clone)]
pub struct UlamOperator {
    kernel: NoiseKernel,
    images: Vec<Vec<(f64, f64, f64)>>,
}

impl UlamOperator {
    pub fn new(map: &MapSpec, kernel: &NoiseKernel, n_bins: usize, quad_order: usize) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::InvalidArgument("n_bins must be at least 2".into()));
        }
        if quad_order < 2 {
            return Err(Error::InvalidArgument("quad_order must be at least 2".into()));
        }
        let gl = GaussLegendre::new(quad_order);
        Ok(Self { kernel: *kernel, images: cell_images(map, n_bins, 1, &gl)? })
    }
}

impl MatVec for UlamOperator {
    fn dim(&self) -> usize {
        self.images.len()
    }

    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (nodes, &xi) in self.images.iter().zip(x) {
            if xi != 0.0 {
                accumulate_column(&self.kernel, nodes, xi, y);
            }
        }
    }
}

/// Ulam discretization with `n_bins` bins and a `quad_order`-point
/// Gauss–Legendre rule per source bin.
pub fn build_ulam(
    map: &MapSpec,
    kernel: &NoiseKernel,
    n_bins: usize,
    quad_order: usize,
) -> Result<TransferMatrix> {
    if n_bins < 2 {
        return Err(Error::InvalidArgument("n_bins must be at least 2".into()));
    }
    if quad_order < 2 {
        return Err(Error::InvalidArgument("quad_order must be at least 2".into()));
    }
    let gl = GaussLegendre::new(quad_order);
    let images = cell_images(map, n_bins, 1, &gl)?;
    let matrix = Matrix::from_columns_par(n_bins, n_bins, |i| {
        let mut col = vec![0.0; n_bins];
        accumulate_column(kernel, &images[i], 1.0, &mut col);
        for v in col.iter_mut() {
            if *v < 0.0 {
                if *v < -1e-14 {
                    warn!("clipping quadrature negative {v:e} in column {i}");
                }
                *v = 0.0;
            }
        }
        col
    });
    let tm = TransferMatrix {
        matrix,
        representation: Representation::Ulam { n_bins },
        metadata: TransferMetadata {
            map: map.id(),
            kernel: kernel.to_string(),
            epsilon: kernel.epsilon,
            quad_order,
            warnings: vec![],
        },
        stochastic: true,
    };
    let dev = tm.max_column_sum_deviation();
    if dev > 1e-12 {
        debug!("Ulam column-sum deviation {dev:e}");
    }
    Ok(tm)
}

/// Options for [`build_piecewise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiecewiseOptions {
    pub quad_order: usize,
    pub subcells: usize,
}

impl Default for PiecewiseOptions {
    fn default() -> Self {
        Self { quad_order: DEFAULT_QUAD_ORDER, subcells: DEFAULT_SUBCELLS }
    }
}

/// Galerkin matrix of the noisy operator on piecewise Legendre expansions.
///
/// `piece_width` is rounded to the nearest `1/m`; `degree` is the Legendre
/// degree per piece, giving `D = m (degree + 1)`.
pub fn build_piecewise(
    map: &MapSpec,
    kernel: &NoiseKernel,
    piece_width: f64,
    degree: usize,
    opts: PiecewiseOptions,
) -> Result<TransferMatrix> {
    if kernel.family != KernelFamily::Gaussian {
        return Err(Error::NotImplemented(
            "piecewise-polynomial transfer operators need a Gaussian kernel".into(),
        ));
    }
    if degree < 1 {
        return Err(Error::InvalidArgument("degree must be at least 1".into()));
    }
    if !(piece_width > 0.0 && piece_width <= 1.0) {
        return Err(Error::InvalidArgument(format!("piece width {piece_width} outside (0, 1]")));
    }
    if opts.quad_order < 2 || opts.subcells < 1 {
        return Err(Error::InvalidArgument("quad_order >= 2 and subcells >= 1 required".into()));
    }
    let pieces = (1.0 / piece_width).round().max(1.0) as usize;
    let nb = degree + 1;
    let dim = pieces * nb;
    let w = 1.0 / pieces as f64;

    let mut warnings = Vec::new();
    for d in map.detect_discontinuities(10_000) {
        let on_breakpoint = ((d * pieces as f64) - (d * pieces as f64).round()).abs() < 1e-6;
        if !on_breakpoint {
            let msg = format!("map appears discontinuous at x = {d:.6}, inside a piece");
            warn!("{msg}");
            warnings.push(msg);
        }
    }

    let gl = GaussLegendre::new(opts.quad_order);
    let images = cell_images(map, pieces, opts.subcells, &gl)?;

    // Target-side quadrature nodes: (piece, y, weight, Legendre values at y)
    let sub_h = w / opts.subcells as f64;
    let mut targets: Vec<(usize, f64, f64, Vec<f64>)> = Vec::new();
    for p in 0..pieces {
        for s in 0..opts.subcells {
            let lo = p as f64 * w + s as f64 * sub_h;
            for (y, wy) in gl.on(lo, lo + sub_h) {
                let t = 2.0 * (y / w - p as f64) - 1.0;
                let mut basis = vec![0.0; nb];
                legendre_all(t, &mut basis);
                targets.push((p, y, wy, basis));
            }
        }
    }

    // Projection of q(c, .) onto every target basis function. The k = 0
    // coefficient uses exact kernel masses so that total mass is preserved
    // to rounding error.
    let project = |c: f64| -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (p, y, wy, basis) in &targets {
            let q = kernel.density(c, *y);
            for k in 1..nb {
                out[p * nb + k] += wy * q * basis[k];
            }
        }
        for p in 0..pieces {
            out[p * nb] = kernel.mass(c, p as f64 * w, (p + 1) as f64 * w) / w;
            for k in 1..nb {
                out[p * nb + k] *= (2 * k + 1) as f64 / w;
            }
        }
        out
    };

    let blocks: Vec<Vec<Vec<f64>>> = {
        use rayon::prelude::*;
        (0..pieces)
            .into_par_iter()
            .map(|p| {
                let mut cols = vec![vec![0.0; dim]; nb];
                let mut basis = vec![0.0; nb];
                for &(x, wx, c) in &images[p] {
                    let t = 2.0 * (x / w - p as f64) - 1.0;
                    legendre_all(t, &mut basis);
                    let proj = project(c);
                    // wx is normalized by the piece width; the source integral
                    // is over x, so restore the width
                    for k in 0..nb {
                        let s = wx * w * basis[k];
                        for (acc, v) in cols[k].iter_mut().zip(&proj) {
                            *acc += s * v;
                        }
                    }
                }
                cols
            })
            .collect()
    };
    let mut matrix = Matrix::zeros(dim, dim);
    for (p, cols) in blocks.iter().enumerate() {
        for (k, col) in cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                matrix[(i, p * nb + k)] = *v;
            }
        }
    }
    let tm = TransferMatrix {
        matrix,
        representation: Representation::PiecewisePoly { pieces, degree },
        metadata: TransferMetadata {
            map: map.id(),
            kernel: kernel.to_string(),
            epsilon: kernel.epsilon,
            quad_order: opts.quad_order,
            warnings,
        },
        stochastic: false,
    };
    debug!("piecewise mass drift {:e}", tm.mass_drift());
    Ok(tm)
}

/// L1 norm of a density difference in its representation (an upper bound
/// on the function L1 norm for the Legendre representation).
pub fn density_norm(rep: Representation, v: &[f64]) -> f64 {
    match rep {
        Representation::Ulam { .. } => l1_norm(v),
        Representation::PiecewisePoly { pieces, .. } => l1_norm(v) / pieces as f64,
    }
}
