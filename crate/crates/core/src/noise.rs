//! Noise kernels `q(c, x)`: the law of the next state given the noiseless
//! image `c = T(x)`, adjusted so that it lives on [0,1].
//!
//! The Gaussian family is parameterized by its standard deviation `eps`, so
//! both families share `eps` as a length scale.

use std::f64::consts::{E, PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussian image sums are truncated this many standard deviations out.
const GAUSS_TAIL: f64 = 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    UniformBall,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Periodic images: the state space is the circle.
    #[default]
    Wrap,
    /// Mirror images across 0 and 1.
    Reflect,
    /// Restrict to [0,1] and divide by the retained mass.
    Renormalize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseKernel {
    pub family: KernelFamily,
    pub epsilon: f64,
    pub boundary: Boundary,
}

impl FromStr for KernelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" | "uniform-ball" | "ball" => Ok(KernelFamily::UniformBall),
            "gaussian" | "normal" => Ok(KernelFamily::Gaussian),
            _ => Err(Error::InvalidArgument(format!("unknown kernel family `{s}`"))),
        }
    }
}

impl FromStr for Boundary {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wrap" => Ok(Boundary::Wrap),
            "reflect" => Ok(Boundary::Reflect),
            "renormalize" => Ok(Boundary::Renormalize),
            _ => Err(Error::InvalidArgument(format!("unknown boundary mode `{s}`"))),
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::UniformBall => "uniform-ball",
            KernelFamily::Gaussian => "gaussian",
        })
    }
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Boundary::Wrap => "wrap",
            Boundary::Reflect => "reflect",
            Boundary::Renormalize => "renormalize",
        })
    }
}

impl fmt::Display for NoiseKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.family, self.epsilon, self.boundary)
    }
}

/// `family:epsilon[:boundary]`, e.g. `gaussian:0.05:wrap`.
impl FromStr for NoiseKernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(Error::InvalidArgument(format!(
                "kernel `{s}` must look like family:epsilon[:boundary]"
            )));
        }
        let family = parts[0].parse()?;
        let epsilon: f64 = parts[1]
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad epsilon `{}`", parts[1])))?;
        let boundary = match parts.get(2) {
            Some(b) => b.parse()?,
            None => Boundary::default(),
        };
        NoiseKernel::new(family, epsilon, boundary)
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// `Phi(b) - Phi(a)` without cancellation in either tail.
fn std_normal_mass(a: f64, b: f64) -> f64 {
    if a >= b {
        return 0.0;
    }
    if a >= 0.0 {
        0.5 * (libm::erfc(a / SQRT_2) - libm::erfc(b / SQRT_2))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b / SQRT_2) - libm::erfc(-a / SQRT_2))
    } else {
        0.5 * (libm::erf(b / SQRT_2) - libm::erf(a / SQRT_2))
    }
}

impl NoiseKernel {
    pub fn new(family: KernelFamily, epsilon: f64, boundary: Boundary) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon = {epsilon} must be positive")));
        }
        Ok(Self { family, epsilon, boundary })
    }

    pub fn gaussian(epsilon: f64, boundary: Boundary) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, epsilon, boundary)
    }

    pub fn uniform_ball(epsilon: f64, boundary: Boundary) -> Result<Self> {
        Self::new(KernelFamily::UniformBall, epsilon, boundary)
    }

    /// Half-width of the (truncated) support of the unadjusted kernel.
    pub fn reach(&self) -> f64 {
        match self.family {
            KernelFamily::UniformBall => self.epsilon,
            KernelFamily::Gaussian => GAUSS_TAIL * self.epsilon,
        }
    }

    /// Density of the kernel on the whole line.
    fn line_pdf(&self, center: f64, y: f64) -> f64 {
        let e = self.epsilon;
        match self.family {
            KernelFamily::UniformBall => {
                if (y - center).abs() <= e {
                    0.5 / e
                } else {
                    0.0
                }
            }
            KernelFamily::Gaussian => {
                let z = (y - center) / e;
                (-0.5 * z * z).exp() / (e * (2.0 * PI).sqrt())
            }
        }
    }

    /// Mass of the line kernel on `[a, b]`.
    fn line_mass(&self, center: f64, a: f64, b: f64) -> f64 {
        if a >= b {
            return 0.0;
        }
        let e = self.epsilon;
        match self.family {
            KernelFamily::UniformBall => {
                let lo = a.max(center - e);
                let hi = b.min(center + e);
                if hi > lo {
                    (hi - lo) / (2.0 * e)
                } else {
                    0.0
                }
            }
            KernelFamily::Gaussian => std_normal_mass((a - center) / e, (b - center) / e),
        }
    }

    fn line_cdf(&self, center: f64, y: f64) -> f64 {
        match self.family {
            KernelFamily::UniformBall => {
                ((y - center + self.epsilon) / (2.0 * self.epsilon)).clamp(0.0, 1.0)
            }
            KernelFamily::Gaussian => std_normal_cdf((y - center) / self.epsilon),
        }
    }

    /// Integer shifts `k` whose unit cell `[k, k+1]` meets the kernel support.
    fn wrap_images(&self, center: f64) -> std::ops::RangeInclusive<i64> {
        let r = self.reach();
        ((center - r).floor() as i64)..=((center + r).floor() as i64)
    }

    /// `k` such that `[2k-1, 2k+1]` meets the kernel support.
    fn reflect_images(&self, center: f64) -> std::ops::RangeInclusive<i64> {
        let r = self.reach();
        (((center - r - 1.0) / 2.0).floor() as i64)..=(((center + r + 1.0) / 2.0).ceil() as i64)
    }

    fn renorm_mass(&self, center: f64) -> f64 {
        self.line_mass(center, 0.0, 1.0)
    }

    /// Boundary-adjusted density of the next state at `x` given center `c`.
    pub fn density(&self, center: f64, x: f64) -> f64 {
        match self.boundary {
            Boundary::Wrap => self
                .wrap_images(center)
                .map(|k| self.line_pdf(center, x + k as f64))
                .sum(),
            Boundary::Reflect => self
                .reflect_images(center)
                .map(|k| {
                    let k2 = 2.0 * k as f64;
                    self.line_pdf(center, k2 + x) + self.line_pdf(center, k2 - x)
                })
                .sum(),
            Boundary::Renormalize => {
                let z = self.renorm_mass(center);
                if z > 0.0 {
                    self.line_pdf(center, x) / z
                } else {
                    0.0
                }
            }
        }
    }

    /// Mass of the adjusted kernel on `[a, b] ⊂ [0,1]`.
    pub fn mass(&self, center: f64, a: f64, b: f64) -> f64 {
        let a = a.max(0.0);
        let b = b.min(1.0);
        if a >= b {
            return 0.0;
        }
        match self.boundary {
            Boundary::Wrap => self
                .wrap_images(center)
                .map(|k| self.line_mass(center, a + k as f64, b + k as f64))
                .sum(),
            Boundary::Reflect => self
                .reflect_images(center)
                .map(|k| {
                    let k2 = 2.0 * k as f64;
                    self.line_mass(center, k2 + a, k2 + b) + self.line_mass(center, k2 - b, k2 - a)
                })
                .sum(),
            Boundary::Renormalize => {
                let z = self.renorm_mass(center);
                if z > 0.0 {
                    self.line_mass(center, a, b) / z
                } else {
                    // only reachable for a uniform ball entirely outside
                    // [0,1]; collapse onto the nearest endpoint
                    let target = if center < 0.5 { 0.0 } else { 1.0 };
                    if (a..=b).contains(&target) {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        }
    }

    /// Mass on `[0, x]`.
    pub fn cdf(&self, center: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        match self.boundary {
            Boundary::Renormalize => {
                let z = self.renorm_mass(center);
                if z > 0.0 {
                    ((self.line_cdf(center, x) - self.line_cdf(center, 0.0)) / z).clamp(0.0, 1.0)
                } else {
                    self.mass(center, 0.0, x)
                }
            }
            _ => self.mass(center, 0.0, x).clamp(0.0, 1.0),
        }
    }

    /// One draw of the next state given center `c`.
    pub fn sample<R: Rng + ?Sized>(&self, center: f64, rng: &mut R) -> f64 {
        let e = self.epsilon;
        let draw = |rng: &mut R| match self.family {
            KernelFamily::UniformBall => center + e * rng.random_range(-1.0..=1.0),
            KernelFamily::Gaussian => center + e * rng.sample::<f64, _>(StandardNormal),
        };
        match self.boundary {
            Boundary::Wrap => {
                let y = draw(rng).rem_euclid(1.0);
                // rem_euclid can round up to exactly 1.0 for tiny negatives
                if y >= 1.0 {
                    0.0
                } else {
                    y
                }
            }
            Boundary::Reflect => {
                let t = draw(rng).rem_euclid(2.0);
                if t > 1.0 {
                    2.0 - t
                } else {
                    t
                }
            }
            Boundary::Renormalize => match self.family {
                KernelFamily::UniformBall => {
                    let lo = (center - e).max(0.0);
                    let hi = (center + e).min(1.0);
                    if hi <= lo {
                        if center < 0.5 {
                            0.0
                        } else {
                            1.0
                        }
                    } else {
                        rng.random_range(lo..=hi)
                    }
                }
                KernelFamily::Gaussian => loop {
                    let y = draw(rng);
                    if (0.0..=1.0).contains(&y) {
                        break y;
                    }
                },
            },
        }
    }

    /// Differential entropy in bits of the unadjusted (whole-line) kernel.
    pub fn entropy_bits(&self) -> f64 {
        match self.family {
            KernelFamily::UniformBall => (2.0 * self.epsilon).log2(),
            KernelFamily::Gaussian => 0.5 * (2.0 * PI * E * self.epsilon * self.epsilon).log2(),
        }
    }

    /// `-∫ f log2 f` of the unadjusted kernel by composite Gauss–Legendre
    /// over its (truncated) support.
    pub fn entropy_bits_quadrature(&self, panels: usize) -> f64 {
        let r = self.reach();
        let gl = crate::quad::GaussLegendre::new(16);
        -gl.integrate_composite(-r, r, panels.max(1), |y| {
            let f = self.line_pdf(0.0, y);
            if f > 0.0 {
                f * f.log2()
            } else {
                0.0
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::GaussLegendre;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all_boundaries() -> [Boundary; 3] {
        [Boundary::Wrap, Boundary::Reflect, Boundary::Renormalize]
    }

    #[test]
    fn quadrature_entropy_matches_closed_form() {
        for eps in [0.5, 0.1, 0.01, 1.0 / 256.0] {
            for k in [
                NoiseKernel::gaussian(eps, Boundary::Wrap).unwrap(),
                NoiseKernel::uniform_ball(eps, Boundary::Wrap).unwrap(),
            ] {
                assert!((k.entropy_bits_quadrature(64) - k.entropy_bits()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn density_examples() {
        let u = NoiseKernel::uniform_ball(0.1, Boundary::Wrap).unwrap();
        assert!((u.density(0.5, 0.55) - 5.0).abs() < 1e-12);
        assert_eq!(u.density(0.5, 0.75), 0.0);
        // oracle: explicit wrapped series with 5 images on each side
        let g = NoiseKernel::gaussian(0.05, Boundary::Wrap).unwrap();
        let oracle: f64 = (-5..=5)
            .map(|k| {
                let z = (0.5 + k as f64 - 0.5) / 0.05;
                (-0.5 * z * z).exp() / (0.05 * (2.0 * PI).sqrt())
            })
            .sum();
        assert!((oracle - 7.97885).abs() < 1e-5);
        assert!((g.density(0.5, 0.5) - oracle).abs() < 1e-12);
    }

    #[test]
    fn cdf_examples() {
        for b in all_boundaries() {
            for fam in [KernelFamily::UniformBall, KernelFamily::Gaussian] {
                let k = NoiseKernel::new(fam, 0.07, b).unwrap();
                for c in [0.0, 0.3, 1.0] {
                    assert!((k.cdf(c, 1.0) - 1.0).abs() < 1e-10);
                    assert!((k.mass(c, 0.0, 1.0) - 1.0).abs() < 1e-10, "{k} c={c}");
                }
            }
        }
        let u = NoiseKernel::uniform_ball(0.1, Boundary::Wrap).unwrap();
        assert!((u.cdf(0.5, 0.5) - 0.5).abs() < 1e-15);
        // Oracle: (Phi(1) - Phi(0)) / (Phi(10) - Phi(0)) with Phi(1) - Phi(0) = 0.3413447460685429
        // and Phi(10) - Phi(0) = 0.5 - 7.6e-24.
        let g = NoiseKernel::gaussian(0.1, Boundary::Renormalize).unwrap();
        let want = 0.341_344_746_068_542_9 / 0.5;
        assert!((g.cdf(0.0, 0.1) - want).abs() < 1e-6);
        assert!((want - 0.682689).abs() < 1e-6);
    }

    #[test]
    fn mass_is_accurate_in_the_far_tail() {
        let g = NoiseKernel::gaussian(0.01, Boundary::Renormalize).unwrap();
        let m = g.mass(0.1, 0.2, 0.3);
        // Phi(-10) - Phi(-20) = 7.619853024160527e-24; a naive CDF difference gives 0
        assert!((m / 7.619_853_024_160_527e-24 - 1.0).abs() < 1e-10, "{m}");
    }

    #[test]
    fn normalization_over_random_kernels() {
        use rand::Rng;
        let gl = GaussLegendre::new(16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let fam = if rng.random_bool(0.5) { KernelFamily::Gaussian } else { KernelFamily::UniformBall };
            let b = all_boundaries()[rng.random_range(0..3)];
            let eps = rng.random_range(0.02..0.6);
            let k = NoiseKernel::new(fam, eps, b).unwrap();
            let c: f64 = rng.random();
            // adaptive enough: panels split at every kink of the uniform kernel
            let mut cuts = vec![0.0, 1.0];
            for s in [-1.0, 1.0] {
                for shift in -3..=3 {
                    for sign in [-1.0, 1.0] {
                        let p = sign * (c + s * eps) + shift as f64;
                        if p > 0.0 && p < 1.0 {
                            cuts.push(p);
                        }
                    }
                }
            }
            cuts.sort_by(f64::total_cmp);
            let total: f64 = cuts
                .windows(2)
                .map(|w| gl.integrate_composite(w[0], w[1], 64, |x| k.density(c, x)))
                .sum();
            assert!((total - 1.0).abs() < 1e-9, "{k} c={c} total={total}");
            assert!(k.density(c, rng.random()) >= 0.0);
        }
    }

    #[test]
    fn cdf_differentiates_to_density() {
        let h = 1e-5;
        for b in all_boundaries() {
            let k = NoiseKernel::gaussian(0.1, b).unwrap();
            for &(c, x) in &[(0.3, 0.4), (0.05, 0.2), (0.9, 0.7), (0.5, 0.5)] {
                let fd = (k.cdf(c, x + h) - k.cdf(c, x - h)) / (2.0 * h);
                assert!((fd - k.density(c, x)).abs() < 1e-5, "{k} c={c} x={x}");
            }
        }
        let u = NoiseKernel::uniform_ball(0.2, Boundary::Reflect).unwrap();
        let fd = (u.cdf(0.1, 0.15 + h) - u.cdf(0.1, 0.15 - h)) / (2.0 * h);
        assert!((fd - u.density(0.1, 0.15)).abs() < 1e-6);
    }

    #[test]
    fn entropy_closed_forms() {
        assert!((NoiseKernel::uniform_ball(0.25, Boundary::Wrap).unwrap().entropy_bits() + 1.0).abs() < 1e-15);
        assert!(NoiseKernel::uniform_ball(0.5, Boundary::Wrap).unwrap().entropy_bits().abs() < 1e-15);
        // oracle: -∫ f log2 f over ±8 eps by composite Gauss-Legendre
        let eps = 0.1;
        let gl = GaussLegendre::new(16);
        let f = |y: f64| (-0.5 * (y / eps).powi(2)).exp() / (eps * (2.0 * PI).sqrt());
        let h = -gl.integrate_composite(-8.0 * eps, 8.0 * eps, 64, |y| f(y) * f(y).log2());
        assert!((h + 1.2749).abs() < 1e-3);
        let g = NoiseKernel::gaussian(eps, Boundary::Wrap).unwrap();
        assert!((g.entropy_bits() - h).abs() < 1e-9);
    }

    #[test]
    fn entropy_increases_with_epsilon() {
        for fam in [KernelFamily::UniformBall, KernelFamily::Gaussian] {
            let mut prev = f64::NEG_INFINITY;
            for i in 1..50 {
                let e = NoiseKernel::new(fam, i as f64 * 0.01, Boundary::Wrap).unwrap().entropy_bits();
                assert!(e > prev);
                prev = e;
            }
        }
    }

    #[test]
    fn samples_respect_support_and_seed() {
        let u = NoiseKernel::uniform_ball(0.1, Boundary::Wrap).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws: Vec<f64> = (0..10_000).map(|_| u.sample(0.5, &mut rng)).collect();
        assert!(draws.iter().all(|&x| (0.4..=0.6).contains(&x)));
        let mut rng2 = ChaCha8Rng::seed_from_u64(42);
        let again: Vec<f64> = (0..10_000).map(|_| u.sample(0.5, &mut rng2)).collect();
        assert_eq!(draws, again);

        let g = NoiseKernel::gaussian(0.05, Boundary::Reflect).unwrap();
        assert!((0..10_000).all(|_| (0.0..=1.0).contains(&g.sample(0.0, &mut rng))));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(NoiseKernel::gaussian(0.0, Boundary::Wrap).is_err());
        assert!("gauss:0.05".parse::<NoiseKernel>().is_err());
        assert!("gaussian:abc:wrap".parse::<NoiseKernel>().is_err());
        assert!("gaussian:0.1:bounce".parse::<NoiseKernel>().is_err());
        let k: NoiseKernel = "uniform-ball:0.1:reflect".parse().unwrap();
        assert_eq!(k.to_string(), "uniform-ball:0.1:reflect");
        let k: NoiseKernel = "gaussian:0.2".parse().unwrap();
        assert_eq!(k.boundary, Boundary::Wrap);
    }
}
