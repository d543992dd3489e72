//! `M^T v` for huge `T` through a fixed low-degree polynomial in `M`.
//!
//! For a stochastic `M` whose non-unit spectrum lies in `[-rho, rho]` with
//! `rho = 1 - gamma`, both `M^T` (once `T >= T_min`) and the normalized
//! Chebyshev amplifier `p(M) = T_d(M / rho) / T_d(1 / rho)` are within
//! `2^-(n+1)` of the stationary projector, so they agree to `2^-n`.

use log::debug;
use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::linalg::{MatVec, Matrix};

/// Points sampled by the scalar certificate.
pub const CERTIFICATE_SAMPLES: usize = 10_000;
/// Largest dimension accepted by [`power_by_squaring`].
pub const MAX_DENSE_DIM: usize = 2048;

/// Which closed form the coefficients came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Construction {
    /// `T_d(x / rho) / T_d(1 / rho)`.
    Amplifier,
    /// `x^d`, used when `rho = 0` or `T_d(1 / rho)` overflows.
    Monomial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub p_at_one_error: f64,
    pub max_abs_p: f64,
    pub max_abs_power: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerPolynomial {
    pub degree: usize,
    /// Chebyshev coefficients in the variable `x / scale`.
    pub coefficients: Vec<f64>,
    pub scale: f64,
    pub gamma: f64,
    pub rho: f64,
    pub t: BigUint,
    pub n: u32,
    pub construction: Construction,
    pub certificate: Certificate,
    pub certified: bool,
}

/// `ceil((n+2) ln 2 / sqrt(2 gamma))`.
pub fn polynomial_degree(gamma: f64, n: u32) -> usize {
    ((n as f64 + 2.0) * std::f64::consts::LN_2 / (2.0 * gamma).sqrt()).ceil() as usize
}

/// `ceil((n+1) ln 2 / gamma)`, the least `T` with `(1 - gamma)^T <= 2^-(n+1)`
/// guaranteed by `1 - gamma <= exp(-gamma)`.
pub fn t_min(gamma: f64, n: u32) -> BigUint {
    let v = ((n as f64 + 1.0) * std::f64::consts::LN_2 / gamma).ceil();
    BigUint::from(v as u128)
}

/// `sum_k c_k T_k(y)` by Clenshaw.
pub fn chebyshev_eval(coeffs: &[f64], y: f64) -> f64 {
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &c in coeffs.iter().skip(1).rev() {
        let b = c + 2.0 * y * b1 - b2;
        b2 = b1;
        b1 = b;
    }
    coeffs.first().copied().unwrap_or(0.0) + y * b1 - b2
}

/// `T_d(z)` by the three-term recurrence.
fn chebyshev_t(d: usize, z: f64) -> f64 {
    let (mut a, mut b) = (1.0, z);
    if d == 0 {
        return 1.0;
    }
    for _ in 1..d {
        let c = 2.0 * z * b - a;
        a = b;
        b = c;
    }
    b
}

/// Chebyshev coefficients of `x^d`.
fn monomial_coefficients(d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d + 1];
    let mut binom = 1.0f64; // C(d, j)
    let scale = (2.0f64).powi(1 - d as i32);
    for j in 0..=d / 2 {
        let k = d - 2 * j;
        c[k] = if k == 0 { 0.5 * scale * binom } else { scale * binom };
        binom = binom * (d - j) as f64 / (j + 1) as f64;
    }
    if d == 0 {
        c[0] = 1.0;
    }
    c
}

/// `|x|^T` with the sign of `x^T`, for arbitrary-precision `T`.
fn scalar_power(x: f64, t: &BigUint) -> f64 {
    if t.is_zero() {
        return 1.0;
    }
    if x == 0.0 {
        return 0.0;
    }
    let tf = t.to_f64().unwrap_or(f64::INFINITY);
    let mag = (tf * x.abs().ln()).exp();
    let odd = t.bit(0);
    if x < 0.0 && odd {
        -mag
    } else {
        mag
    }
}

pub fn build_power_polynomial(gamma: f64, t: &BigUint, n: u32) -> Result<PowerPolynomial> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument("gap must lie in (0, 1]".into()));
    }
    let tmin = t_min(gamma, n);
    if t < &tmin {
        return Err(Error::PowerTooSmall { t: t.to_string(), t_min: tmin.to_string() });
    }
    let rho = 1.0 - gamma;
    let degree = polynomial_degree(gamma, n);
    let amplified = if rho > 0.0 { chebyshev_t(degree, 1.0 / rho) } else { f64::INFINITY };
    let (construction, coefficients, scale) = if amplified.is_finite() {
        let mut c = vec![0.0; degree + 1];
        c[degree] = 1.0 / amplified;
        (Construction::Amplifier, c, rho)
    } else {
        (Construction::Monomial, monomial_coefficients(degree), 1.0)
    };
    let eval = |x: f64| chebyshev_eval(&coefficients, x / scale);
    let p_at_one_error = (eval(1.0) - 1.0).abs();
    let mut max_abs_p = 0.0f64;
    let mut max_abs_power = 0.0f64;
    for i in 0..CERTIFICATE_SAMPLES {
        let x = -rho + 2.0 * rho * i as f64 / (CERTIFICATE_SAMPLES - 1) as f64;
        max_abs_p = max_abs_p.max(eval(x).abs());
        max_abs_power = max_abs_power.max(scalar_power(x, t).abs());
    }
    let bound = (2.0f64).powi(-(n as i32) - 1);
    let certified = p_at_one_error <= bound / 2.0 && max_abs_p <= bound && max_abs_power <= bound;
    let certificate = Certificate { p_at_one_error, max_abs_p, max_abs_power };
    if !certified {
        return Err(Error::CertificateFailed(format!(
            "|p(1)-1| = {p_at_one_error:e}, max|p| = {max_abs_p:e}, max|x^T| = {max_abs_power:e}, bound {bound:e}"
        )));
    }
    debug!("degree {degree} {construction:?} polynomial for gamma {gamma}, n {n}");
    Ok(PowerPolynomial {
        degree,
        coefficients,
        scale,
        gamma,
        rho,
        t: t.clone(),
        n,
        construction,
        certificate,
        certified,
    })
}

impl PowerPolynomial {
    /// Scalar value `p(x)`.
    pub fn eval(&self, x: f64) -> f64 {
        chebyshev_eval(&self.coefficients, x / self.scale)
    }
}

/// `p(M) v` by the Clenshaw recurrence. Holds three length-`D` vectors at a
/// time (the output reuses one of them) and touches `M` only through
/// [`MatVec::matvec`].
pub fn apply_power_polynomial<M: MatVec + ?Sized>(p: &PowerPolynomial, m: &M, v: &[f64]) -> Result<Vec<f64>> {
    if !p.certified {
        return Err(Error::CertificateFailed("polynomial is not certified".into()));
    }
    let n = m.dim();
    if v.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: v.len() });
    }
    let inv = 1.0 / p.scale;
    let mut b1 = vec![0.0; n];
    let mut b2 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for &c in p.coefficients.iter().skip(1).rev() {
        m.matvec(&b1, &mut tmp);
        for i in 0..n {
            b2[i] = c * v[i] + 2.0 * inv * tmp[i] - b2[i];
        }
        std::mem::swap(&mut b1, &mut b2);
    }
    m.matvec(&b1, &mut tmp);
    let c0 = p.coefficients[0];
    for i in 0..n {
        b2[i] = c0 * v[i] + inv * tmp[i] - b2[i];
    }
    Ok(b2)
}

/// `M^T` by binary exponentiation in double precision.
///
/// Each squaring doubles a column-sum error, so after `k` squarings rounding
/// alone would leave sums off by about `2^k` ulps. When `M` is column-stochastic
/// every product is renormalized to unit column sums.
pub fn power_by_squaring(m: &Matrix, t: &BigUint) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::InvalidArgument("matrix must be square".into()));
    }
    if m.rows() > MAX_DENSE_DIM {
        return Err(Error::InvalidArgument(format!("dimension {} exceeds {MAX_DENSE_DIM}", m.rows())));
    }
    let stochastic = m.column_sums().iter().all(|s| (s - 1.0).abs() <= 1e-9)
        && (0..m.rows()).all(|i| m.row(i).iter().all(|&v| v >= 0.0));
    let fix = |mut a: Matrix| {
        if stochastic {
            let sums = a.column_sums();
            for i in 0..a.rows() {
                a.row_mut(i).iter_mut().zip(&sums).for_each(|(v, s)| *v /= s);
            }
        }
        a
    };
    let mut result: Option<Matrix> = None;
    let mut base = m.clone();
    let bits = t.bits();
    for bit in 0..bits {
        if t.bit(bit) {
            result = Some(match result {
                None => base.clone(),
                Some(r) => fix(r.matmul(&base)),
            });
        }
        if bit + 1 < bits {
            base = fix(base.matmul(&base));
        }
    }
    let out = result.unwrap_or_else(|| Matrix::identity(m.rows()));
    let drift = out.column_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    debug!("power_by_squaring: column-sum drift {drift:e}");
    Ok(out)
}

/// Parses `123`, `2^40` or `10^9` into an integer.
pub fn parse_power(text: &str) -> Result<BigUint> {
    let bad = || Error::InvalidArgument(format!("cannot parse power `{text}`"));
    let text = text.trim();
    if let Some((base, exp)) = text.split_once('^') {
        let base: BigUint = base.trim().parse().map_err(|_| bad())?;
        let exp: u32 = exp.trim().parse().map_err(|_| bad())?;
        if exp > 1 << 20 {
            return Err(bad());
        }
        Ok(num_traits::pow(base, exp as usize))
    } else {
        text.parse().map_err(|_| bad())
    }
}

/// `2^k` as a [`BigUint`].
pub fn pow2(k: u32) -> BigUint {
    BigUint::one() << k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degree_and_threshold_examples() {
        assert_eq!(polynomial_degree(1.0, 20), 11);
        assert_eq!(polynomial_degree(0.5, 20), 16);
        assert_eq!(t_min(0.5, 20), BigUint::from(30u32));
        match build_power_polynomial(0.5, &BigUint::from(5u32), 20) {
            Err(e @ Error::PowerTooSmall { .. }) => assert!(e.to_string().starts_with("PowerTooSmall")),
            other => panic!("{other:?}"),
        }
        let p = build_power_polynomial(0.5, &BigUint::from(30u32), 20).unwrap();
        assert_eq!(p.degree, 16);
        assert!(p.certified);
    }

    #[test]
    fn full_gap_uses_monomial() {
        let p = build_power_polynomial(1.0, &pow2(10), 20).unwrap();
        assert_eq!(p.degree, 11);
        assert_eq!(p.construction, Construction::Monomial);
        assert!(p.eval(0.0).abs() <= (2.0f64).powi(-21));
        assert!((p.eval(1.0) - 1.0).abs() < 1e-15);
        for x in [-0.7, 0.3, 0.9] {
            assert!((p.eval(x) - f64::powi(x, 11)).abs() < 1e-15);
        }
    }

    #[test]
    fn clenshaw_matches_trig_form() {
        let c = [0.3, -0.2, 0.5, 0.1];
        for x in [-1.0, -0.4, 0.0, 0.7, 1.0] {
            let th = f64::acos(x);
            let direct: f64 = c.iter().enumerate().map(|(k, ck)| ck * (k as f64 * th).cos()).sum();
            assert!((chebyshev_eval(&c, x) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn squaring_examples() {
        let id = Matrix::identity(4);
        assert_eq!(power_by_squaring(&id, &BigUint::from(1_000_000_000u64)).unwrap(), id);
        let m = Matrix::from_rows(&[vec![0.75, 0.25], vec![0.25, 0.75]]).unwrap();
        let p = power_by_squaring(&m, &BigUint::from(10u32)).unwrap();
        let diag = 0.5 + 0.5f64.powi(11);
        assert!((p[(0, 0)] - diag).abs() < 1e-15 && (p[(1, 1)] - diag).abs() < 1e-15);
        assert!((p[(0, 1)] - (1.0 - diag)).abs() < 1e-15);
        assert_eq!(power_by_squaring(&m, &BigUint::zero()).unwrap(), Matrix::identity(2));
    }

    #[test]
    fn two_state_power_by_polynomial() {
        let m = Matrix::from_rows(&[vec![0.75, 0.25], vec![0.25, 0.75]]).unwrap();
        let p = build_power_polynomial(0.5, &pow2(30), 20).unwrap();
        let out = apply_power_polynomial(&p, &m, &[1.0, 0.0]).unwrap();
        let tol = (2.0f64).powi(-20);
        assert!((out[0] - 0.5).abs() <= tol && (out[1] - 0.5).abs() <= tol);
        let st = apply_power_polynomial(&p, &m, &[0.5, 0.5]).unwrap();
        assert!((st[0] - 0.5).abs() <= tol && (st[1] - 0.5).abs() <= tol);
        assert!(apply_power_polynomial(&p, &m, &[1.0]).is_err());
    }

    #[test]
    fn power_strings() {
        assert_eq!(parse_power("2^40").unwrap(), pow2(40));
        assert_eq!(parse_power("10^9").unwrap(), BigUint::from(1_000_000_000u64));
        assert_eq!(parse_power(" 17 ").unwrap(), BigUint::from(17u32));
        assert!(parse_power("2^x").is_err());
        assert!(parse_power("-3").is_err());
    }
}
