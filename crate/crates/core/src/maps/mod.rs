//! Deterministic interval maps `T: [0,1] -> [0,1]`.

pub mod expr;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use expr::Expr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Builtin {
    /// `lambda * x * (1 - x)`, parameter `lambda` (default 4).
    Logistic,
    /// `2x mod 1`.
    Doubling,
    /// `1 - |1 - 2x|`.
    Tent,
    /// `x + alpha mod 1`, parameter `alpha` (default 0.5).
    Rotation,
    Identity,
    /// `low` for `x < split`, `high` otherwise (defaults 0.5, 0.25, 0.75).
    PiecewiseConst,
}

impl Builtin {
    pub const ALL: [Builtin; 6] = [
        Builtin::Logistic,
        Builtin::Doubling,
        Builtin::Tent,
        Builtin::Rotation,
        Builtin::Identity,
        Builtin::PiecewiseConst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Logistic => "logistic",
            Builtin::Doubling => "doubling",
            Builtin::Tent => "tent",
            Builtin::Rotation => "rotation",
            Builtin::Identity => "identity",
            Builtin::PiecewiseConst => "piecewise-const",
        }
    }

    fn default_params(self) -> BTreeMap<String, f64> {
        let pairs: &[(&str, f64)] = match self {
            Builtin::Logistic => &[("lambda", 4.0)],
            Builtin::Rotation => &[("alpha", 0.5)],
            Builtin::PiecewiseConst => &[("split", 0.5), ("low", 0.25), ("high", 0.75)],
            _ => &[],
        };
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }
}

impl FromStr for Builtin {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Builtin::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown built-in map `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    Builtin(Builtin),
    Expr(Expr),
}

/// A deterministic transition rule on [0,1] with named real parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    pub kind: MapKind,
    pub params: BTreeMap<String, f64>,
    /// Clip out-of-range values to [0,1] instead of failing.
    pub clamp: bool,
}

/// A point where the map evaluates outside [0,1] or to a non-finite value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Violation {
    pub x: f64,
    pub value: f64,
}

impl MapSpec {
    pub fn builtin(b: Builtin) -> Self {
        Self { kind: MapKind::Builtin(b), params: b.default_params(), clamp: false }
    }

    pub fn logistic(lambda: f64) -> Self {
        Self::builtin(Builtin::Logistic).with_param("lambda", lambda)
    }

    pub fn rotation(alpha: f64) -> Self {
        Self::builtin(Builtin::Rotation).with_param("alpha", alpha)
    }

    pub fn piecewise_const(split: f64, low: f64, high: f64) -> Self {
        Self::builtin(Builtin::PiecewiseConst)
            .with_param("split", split)
            .with_param("low", low)
            .with_param("high", high)
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn with_clamp(mut self, clamp: bool) -> Self {
        self.clamp = clamp;
        self
    }

    /// Parses either a built-in name or an expression in `x`.
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        if let Ok(b) = t.parse::<Builtin>() {
            return Ok(Self::builtin(b));
        }
        Ok(Self { kind: MapKind::Expr(expr::parse(text)?), params: BTreeMap::new(), clamp: false })
    }

    /// Short human-readable identifier, used in matrix metadata.
    pub fn id(&self) -> String {
        let body = match &self.kind {
            MapKind::Builtin(b) => b.name().to_string(),
            MapKind::Expr(e) => e.to_string(),
        };
        if self.params.is_empty() {
            body
        } else {
            let ps: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            format!("{body} [{}]", ps.join(", "))
        }
    }

    fn param(&self, name: &str) -> Result<f64> {
        let v = *self.params.get(name).ok_or_else(|| Error::UnboundParameter(name.into()))?;
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!("parameter `{name}` is not finite")));
        }
        Ok(v)
    }

    /// `T(x)` without range checks or clamping.
    pub fn eval_raw(&self, x: f64) -> Result<f64> {
        Ok(match &self.kind {
            MapKind::Builtin(b) => match b {
                Builtin::Logistic => self.param("lambda")? * x * (1.0 - x),
                Builtin::Doubling => (2.0 * x).rem_euclid(1.0),
                Builtin::Tent => 1.0 - (1.0 - 2.0 * x).abs(),
                Builtin::Rotation => (x + self.param("alpha")?).rem_euclid(1.0),
                Builtin::Identity => x,
                Builtin::PiecewiseConst => {
                    if x < self.param("split")? {
                        self.param("low")?
                    } else {
                        self.param("high")?
                    }
                }
            },
            MapKind::Expr(e) => e.eval(x, &self.params)?,
        })
    }

    /// `T(x)` for `x` in [0,1]; clipped when `clamp` is set.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::InvalidArgument(format!("x = {x} is outside [0,1]")));
        }
        let v = self.eval_raw(x)?;
        if !v.is_finite() {
            return Err(Error::Domain { x, value: v });
        }
        if self.clamp {
            Ok(v.clamp(0.0, 1.0))
        } else if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(Error::Domain { x, value: v })
        }
    }

    /// Central difference `(T(x+h) - T(x-h)) / 2h`.
    pub fn derivative(&self, x: f64, h: f64) -> Result<f64> {
        if !(h > 0.0) {
            return Err(Error::InvalidArgument(format!("step h = {h} must be positive")));
        }
        if x - h < 0.0 || x + h > 1.0 {
            return Err(Error::Domain { x, value: f64::NAN });
        }
        Ok((self.eval(x + h)? - self.eval(x - h)?) / (2.0 * h))
    }

    /// Evaluates on the grid `i / samples`, `i = 0..=samples` (both endpoints
    /// included) and reports every point mapping outside [0,1] or to a
    /// non-finite value.
    pub fn validate(&self, samples: usize) -> Result<Vec<Violation>> {
        if samples < 2 {
            return Err(Error::InvalidArgument("validation needs at least 2 samples".into()));
        }
        let mut out = Vec::new();
        for i in 0..=samples {
            let x = i as f64 / samples as f64;
            let v = self.eval_raw(x)?;
            let v_checked = if self.clamp && v.is_finite() { v.clamp(0.0, 1.0) } else { v };
            if !v_checked.is_finite() || !(0.0..=1.0).contains(&v_checked) {
                out.push(Violation { x, value: v });
            }
        }
        Ok(out)
    }

    /// Points where `T` is known not to be smooth, or where `T' = 0`
    /// (so `ln|T'|` is singular). Only available for built-ins; expression
    /// maps fall back to [`MapSpec::detect_discontinuities`].
    pub fn special_points(&self) -> Vec<f64> {
        let mut pts = match &self.kind {
            MapKind::Builtin(b) => match b {
                Builtin::Logistic | Builtin::Doubling | Builtin::Tent => vec![0.5],
                Builtin::Rotation => match self.param("alpha") {
                    Ok(a) => vec![1.0 - a.rem_euclid(1.0)],
                    Err(_) => vec![],
                },
                Builtin::PiecewiseConst => self.param("split").map(|s| vec![s]).unwrap_or_default(),
                Builtin::Identity => vec![],
            },
            MapKind::Expr(_) => self.detect_discontinuities(4096),
        };
        pts.retain(|p| *p > 0.0 && *p < 1.0);
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    }

    /// Locates jumps by dense sampling: a cell whose increment exceeds ten
    /// times the median increment, and does not shrink when the cell is
    /// bisected, is reported by its midpoint. A jump by a whole number
    /// (a wrap-around on the circle) is reported too.
    pub fn detect_discontinuities(&self, samples: usize) -> Vec<f64> {
        let n = samples.max(16);
        let vals: Vec<f64> = (0..=n)
            .map(|i| self.eval_raw(i as f64 / n as f64).unwrap_or(f64::NAN))
            .collect();
        let mut incs: Vec<f64> = vals.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        let mut sorted: Vec<f64> = incs.iter().copied().filter(|v| v.is_finite()).collect();
        sorted.sort_by(f64::total_cmp);
        let median = sorted.get(sorted.len() / 2).copied().unwrap_or(0.0);
        let floor = (10.0 * median).max(1e-9);
        let mut out = Vec::new();
        for (i, inc) in incs.iter_mut().enumerate() {
            if !(inc.is_finite()) || *inc > floor {
                // refine: a genuine jump survives bisection
                let (mut a, mut b) = (i as f64 / n as f64, (i + 1) as f64 / n as f64);
                let mut jump = *inc;
                for _ in 0..30 {
                    let m = 0.5 * (a + b);
                    let fa = self.eval_raw(a).unwrap_or(f64::NAN);
                    let fm = self.eval_raw(m).unwrap_or(f64::NAN);
                    let fb = self.eval_raw(b).unwrap_or(f64::NAN);
                    if (fm - fa).abs() >= (fb - fm).abs() {
                        b = m;
                        jump = (fm - fa).abs();
                    } else {
                        a = m;
                        jump = (fb - fm).abs();
                    }
                }
                let at = 0.5 * (a + b);
                let interior = at > 1e-6 && at < 1.0 - 1e-6;
                if interior && (!jump.is_finite() || jump > 1e-6) {
                    out.push(at);
                }
            }
        }
        out
    }
}

impl fmt::Display for MapSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}
