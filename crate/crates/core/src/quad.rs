//! Gauss–Legendre quadrature and Legendre polynomial helpers.

use std::f64::consts::PI;

/// Nodes and weights of the `order`-point Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let mut nodes = vec![0.0; order];
        let mut weights = vec![0.0; order];
        let n = order as f64;
        for i in 0..(order + 1) / 2 {
            // Tricomi's initial guess, then Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (n + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(order, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(order, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[order - 1 - i] = x;
            weights[i] = w;
            weights[order - 1 - i] = w;
        }
        if order % 2 == 1 {
            nodes[order / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn on(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&t, &w)| (mid + half * t, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.on(a, b).map(|(x, w)| w * f(x)).sum()
    }

    /// Composite rule over `panels` equal sub-intervals of `[a, b]`.
    pub fn integrate_composite<F: FnMut(f64) -> f64>(
        &self,
        a: f64,
        b: f64,
        panels: usize,
        mut f: F,
    ) -> f64 {
        let h = (b - a) / panels as f64;
        (0..panels)
            .map(|p| {
                let lo = a + p as f64 * h;
                let hi = if p + 1 == panels { b } else { lo + h };
                self.integrate(lo, hi, &mut f)
            })
            .sum()
    }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
pub fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let n = n as f64;
    let d = if (1.0 - x * x).abs() < 1e-300 {
        // P_n'(±1) = (±1)^(n+1) n(n+1)/2
        let s = if x > 0.0 || (n as usize) % 2 == 1 { 1.0 } else { -1.0 };
        s * n * (n + 1.0) / 2.0
    } else {
        n * (x * p1 - p0) / (x * x - 1.0)
    };
    (p1, d)
}

/// Writes `P_0(t) .. P_{out.len()-1}(t)` into `out`.
pub fn legendre_all(t: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = t;
    }
    for k in 2..out.len() {
        let kf = k as f64;
        out[k] = ((2.0 * kf - 1.0) * t * out[k - 1] - (kf - 1.0) * out[k - 2]) / kf;
    }
}

/// `∫_{-1}^{t} P_k(s) ds`, using `(P_{k+1} - P_{k-1}) / (2k+1)` for k ≥ 1.
pub fn legendre_integral(k: usize, t: f64) -> f64 {
    if k == 0 {
        return t + 1.0;
    }
    let mut p = vec![0.0; k + 2];
    legendre_all(t, &mut p);
    (p[k + 1] - p[k - 1]) / (2.0 * k as f64 + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_exactly() {
        for order in 1..=20 {
            let gl = GaussLegendre::new(order);
            for deg in 0..(2 * order) {
                let got = gl.integrate(0.0, 1.0, |x| x.powi(deg as i32));
                let want = 1.0 / (deg as f64 + 1.0);
                assert!((got - want).abs() < 1e-13, "order {order} deg {deg}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn weights_sum_to_interval_length() {
        let gl = GaussLegendre::new(8);
        let s: f64 = gl.weights.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        assert_eq!(gl.order(), 8);
    }

    #[test]
    fn legendre_integral_matches_quadrature() {
        let gl = GaussLegendre::new(12);
        let mut p = vec![0.0; 7];
        for k in 0..7 {
            for &t in &[-0.3, 0.2, 0.9, 1.0] {
                let q = gl.integrate(-1.0, t, |s| {
                    legendre_all(s, &mut p);
                    p[k]
                });
                assert!((legendre_integral(k, t) - q).abs() < 1e-13);
            }
        }
        // over the full interval only P_0 has mass
        for k in 1..7 {
            assert!(legendre_integral(k, 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn composite_handles_smooth_integrand() {
        let gl = GaussLegendre::new(8);
        let got = gl.integrate_composite(0.0, PI, 16, f64::sin);
        assert!((got - 2.0).abs() < 1e-14);
    }
}
