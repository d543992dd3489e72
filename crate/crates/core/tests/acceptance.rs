//! End-to-end acceptance suite. Runs every criterion (even after a failure),
//! prints one PASS/FAIL line each, and exits non-zero if any failed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{closed_classes_bfs, dense_gap, random_reversible, tv};
use ergokit::invariant::{
    doeblin_lower_bound, ergodic_components, lyapunov_exponent, spectral_gap_detailed, stationarity_residual,
    stationary, FnDensity,
};
use ergokit::linalg::Matrix;
use ergokit::matpow::{apply_power_polynomial, build_power_polynomial, pow2, power_by_squaring};
use ergokit::memory::{capacity, capacity_at_lag, channel_matrix, memory_scaling, ChannelMatrix, ResolutionRule};
use ergokit::transfer::{build_piecewise, build_ulam, PiecewiseOptions, DEFAULT_QUAD_ORDER};
use ergokit::{Boundary, Builtin, KernelFamily, MapSpec, NoiseKernel, TransferMatrix};
use num_bigint::BigUint;

/// Outcome of one criterion: whether it held and a one-line summary.
type Verdict = (bool, String);

fn h2(p: f64) -> f64 {
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

fn gauss(eps: f64, b: Boundary) -> NoiseKernel {
    NoiseKernel::gaussian(eps, b).unwrap()
}

fn within(start: Instant, limit: Duration) -> (bool, f64) {
    let t = start.elapsed();
    (t <= limit, t.as_secs_f64())
}

fn memory_scaling_identity() -> Verdict {
    let start = Instant::now();
    let eps: Vec<f64> = (3..=8).map(|k| (2.0f64).powi(-k)).collect();
    let map = MapSpec::builtin(Builtin::Identity);
    let res = memory_scaling(&map, KernelFamily::UniformBall, Boundary::Wrap, &eps, ResolutionRule::default(), 1e-9)
        .unwrap();
    let worst = res
        .points
        .iter()
        .map(|p| (p.capacity_bits - (1.0 / (2.0 * p.epsilon)).log2()).abs())
        .fold(0.0, f64::max);
    let (fast, secs) = within(start, Duration::from_secs(120));
    let ok = (0.9..=1.1).contains(&res.slope) && worst <= 0.05 && fast;
    (ok, format!("slope {:.4}, worst point off closed form by {worst:.4} bits, {secs:.1} s", res.slope))
}

fn entropy_closed_forms() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for family in [KernelFamily::UniformBall, KernelFamily::Gaussian] {
        let mut prev = f64::INFINITY;
        for k in 2..=8 {
            let eps = (2.0f64).powi(-k);
            let kern = NoiseKernel::new(family, eps, Boundary::Wrap).unwrap();
            let quad = kern.entropy_bits_quadrature(256);
            let closed = match family {
                KernelFamily::UniformBall => (2.0 * eps).log2(),
                KernelFamily::Gaussian => {
                    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * eps * eps).log2()
                }
            };
            worst = worst.max((quad - closed).abs());
            // eps halves each step, so the entropy must strictly drop
            monotone &= quad < prev;
            prev = quad;
        }
    }
    (worst <= 1e-3 && monotone, format!("worst quadrature error {worst:.2e} bits, strictly monotone: {monotone}"))
}

fn ergodic_decomposition() -> Verdict {
    let eps = 0.1;
    let map = MapSpec::piecewise_const(0.5, 0.25, 0.75);
    let p = build_ulam(&map, &NoiseKernel::uniform_ball(eps, Boundary::Wrap).unwrap(), 128, DEFAULT_QUAD_ORDER).unwrap();
    let d = ergodic_components(&p, 0.0).unwrap();
    let mut states: Vec<Vec<usize>> = d.components.iter().map(|c| c.states.clone()).collect();
    states.sort();
    let matches_oracle = states == closed_classes_bfs(&p.matrix);
    let two = d.components.len() == 2;
    // empty bins between the supports, read around the circle as well
    let separation = if two {
        let (a, b) = (&states[0], &states[1]);
        let inner = b[0] - a[a.len() - 1] - 1;
        let outer = a[0] + 128 - b[b.len() - 1] - 1;
        inner.min(outer) as f64 / 128.0
    } else {
        0.0
    };
    let q = build_ulam(&MapSpec::builtin(Builtin::Doubling), &gauss(0.1, Boundary::Wrap), 128, DEFAULT_QUAD_ORDER).unwrap();
    let single = ergodic_components(&q, 0.0).unwrap().components.len();
    let ok = two && matches_oracle && separation >= 2.0 * eps - 1e-12 && single == 1;
    (
        ok,
        format!(
            "{} components (oracle agrees: {matches_oracle}), separation {separation:.4}, doubling+gaussian {single}",
            d.components.len()
        ),
    )
}

fn representation_equivalence() -> Verdict {
    let start = Instant::now();
    let map = MapSpec::logistic(4.0);
    let k = gauss(0.1, Boundary::Wrap);
    let ulam = build_ulam(&map, &k, 1024, DEFAULT_QUAD_ORDER).unwrap();
    let a = stationary(&ulam, 1e-12, 1_000_000).unwrap().density.to_grid(1024);
    let poly = build_piecewise(&map, &k, 0.1, 8, PiecewiseOptions::default()).unwrap();
    let b = stationary(&poly, 1e-12, 1_000_000).unwrap().density.to_grid(1024);
    let d = tv(&a, &b);
    let (fast, secs) = within(start, Duration::from_secs(120));
    (d <= 5e-3 && fast, format!("total variation {d:.2e} between Ulam (1024 bins) and Legendre (10 pieces, K = 8), {secs:.1} s"))
}

fn matrix_power_corpus() -> Verdict {
    let start = Instant::now();
    let t = pow2(40);
    let n = 16;
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    let mut degrees_ok = true;
    let mut seed = 0u64;
    while cases < 20 {
        seed += 1;
        let dim = 8 + (seed as usize * 7) % 57;
        let m = random_reversible(dim, seed, 0.0);
        if dense_gap(&m) < 0.3 {
            continue;
        }
        let tm = TransferMatrix::from_stochastic(m.clone()).unwrap();
        let gamma = spectral_gap_detailed(&tm, 1e-12, 20_000).unwrap().gap;
        let p = build_power_polynomial(gamma, &t, n).unwrap();
        let expected = ((n as f64 + 2.0) * std::f64::consts::LN_2 / (2.0 * gamma).sqrt()).ceil() as usize;
        degrees_ok &= p.degree == expected;
        let exact = power_by_squaring(&m, &t).unwrap();
        for j in 0..dim {
            let mut e = vec![0.0; dim];
            e[j] = 1.0;
            let col = apply_power_polynomial(&p, &tm, &e).unwrap();
            for i in 0..dim {
                worst = worst.max((col[i] - exact[(i, j)]).abs());
            }
        }
        cases += 1;
    }
    let (fast, secs) = within(start, Duration::from_secs(60));
    let ok = worst <= (2.0f64).powi(-16) && degrees_ok && fast;
    (ok, format!("20 chains, worst entry deviation {worst:.2e} (bound 1.53e-5), degree formula holds: {degrees_ok}, {secs:.1} s"))
}

fn gap_soundness() -> Verdict {
    let start = Instant::now();
    let maps = [MapSpec::builtin(Builtin::Doubling), MapSpec::logistic(4.0), MapSpec::builtin(Builtin::Tent)];
    let mut failures = Vec::new();
    let mut tightest = f64::INFINITY;
    for map in &maps {
        for eps in [0.1, 0.2, 0.4] {
            let k = gauss(eps, Boundary::Wrap);
            let p = build_ulam(map, &k, 128, DEFAULT_QUAD_ORDER).unwrap();
            let gap = spectral_gap_detailed(&p, 1e-10, 20_000).unwrap().gap;
            let doeblin = doeblin_lower_bound(map, &k, 64).unwrap();
            let floor = (-1.0 / (eps * eps)).exp();
            tightest = tightest.min(gap - doeblin);
            if !(gap >= doeblin && doeblin >= floor) {
                failures.push(format!("{map} eps {eps}: gap {gap:.4} doeblin {doeblin:.4} floor {floor:.2e}"));
            }
        }
    }
    let (fast, secs) = within(start, Duration::from_secs(60));
    let detail = if failures.is_empty() {
        format!("9 cases, smallest margin gap - doeblin {tightest:.4}, {secs:.1} s")
    } else {
        failures.join("; ")
    };
    (failures.is_empty() && fast, detail)
}

fn closed_form_oracles() -> Verdict {
    let mut bad = Vec::new();

    // M^T = S + 0.5^T (I - S) for the symmetric 2x2 chain
    let m = Matrix::from_rows(&[vec![0.75, 0.25], vec![0.25, 0.75]]).unwrap();
    for t in [10u32, 41, 200] {
        let sq = power_by_squaring(&m, &BigUint::from(t)).unwrap();
        let diag = 0.5 + 0.5 * 0.5f64.powi(t as i32);
        if (sq[(0, 0)] - diag).abs() > 1e-15 || (sq[(0, 1)] - (1.0 - diag)).abs() > 1e-15 {
            bad.push(format!("2x2 power T = {t}"));
        }
    }
    let p = build_power_polynomial(0.5, &BigUint::from(41u32), 20).unwrap();
    let tm = TransferMatrix::from_stochastic(m).unwrap();
    let col = apply_power_polynomial(&p, &tm, &[1.0, 0.0]).unwrap();
    if (col[0] - (0.5 + 0.5 * 0.5f64.powi(41))).abs() > (2.0f64).powi(-20) {
        bad.push("2x2 polynomial T = 41".into());
    }

    for q in [0.1, 0.25, 0.4] {
        let c = capacity(&ChannelMatrix::binary_symmetric(q).unwrap(), 1e-10, 100_000).unwrap().capacity_bits;
        if (c - (1.0 - h2(q))).abs() > 1e-5 {
            bad.push(format!("BSC p = {q}: {c}"));
        }
    }
    let lag2 = capacity_at_lag(&ChannelMatrix::binary_symmetric(0.1).unwrap(), 2, 1e-10, 100_000).unwrap().capacity_bits;
    if (lag2 - (1.0 - h2(2.0 * 0.1 * 0.9))).abs() > 1e-5 {
        bad.push(format!("lag-2 BSC: {lag2}"));
    }

    let lyap = lyapunov_exponent(&MapSpec::builtin(Builtin::Doubling), &FnDensity(|_| 1.0), 16).unwrap();
    if (lyap - std::f64::consts::LN_2).abs() > 1e-4 {
        bad.push(format!("doubling Lyapunov {lyap}"));
    }

    let circle = [MapSpec::builtin(Builtin::Doubling), MapSpec::rotation(0.3), MapSpec::builtin(Builtin::Identity)];
    for map in &circle {
        for k in [gauss(0.05, Boundary::Wrap), NoiseKernel::uniform_ball(0.1, Boundary::Wrap).unwrap()] {
            let p = build_ulam(map, &k, 200, DEFAULT_QUAD_ORDER).unwrap();
            let rho = stationary(&p, 1e-12, 1_000_000).unwrap().density.to_grid(200);
            let dev = rho.iter().map(|m| (m * 200.0 - 1.0).abs()).fold(0.0, f64::max);
            if dev > 1e-8 {
                bad.push(format!("{map} [{k}] not uniform: {dev:e}"));
            }
        }
    }
    let ok = bad.is_empty();
    (
        ok,
        if ok {
            format!("2x2 powers, BSC at 3 crossovers, lag-2 BSC, doubling Lyapunov {lyap:.6}, uniform invariance on 6 systems")
        } else {
            bad.join("; ")
        },
    )
}

fn invariant_suites() -> Verdict {
    let mut bad = Vec::new();
    let maps = [
        MapSpec::builtin(Builtin::Doubling),
        MapSpec::logistic(4.0),
        MapSpec::builtin(Builtin::Tent),
        MapSpec::logistic(3.7),
        MapSpec::piecewise_const(0.5, 0.25, 0.75),
    ];
    let kernels = [
        gauss(0.05, Boundary::Wrap),
        gauss(0.1, Boundary::Reflect),
        NoiseKernel::uniform_ball(0.08, Boundary::Renormalize).unwrap(),
    ];
    let mut checked = 0;
    for map in &maps {
        for k in &kernels {
            let p = build_ulam(map, k, 96, DEFAULT_QUAD_ORDER).unwrap();
            if p.max_column_sum_deviation() > 1e-10 {
                bad.push(format!("column sums {map} [{k}]"));
            }
            if let Ok(st) = stationary(&p, 1e-10, 1_000_000) {
                let r = stationarity_residual(&p, &st.density).unwrap();
                if r > 1e-9 {
                    bad.push(format!("recomputed residual {r:e} for {map} [{k}]"));
                }
            }
            let w = channel_matrix(map, k, 48, DEFAULT_QUAD_ORDER).unwrap();
            let caps: Vec<_> = (1..=3).map(|lag| capacity_at_lag(&w, lag, 1e-9, 100_000).unwrap()).collect();
            for c in &caps {
                if c.trace.windows(2).any(|s| s[1] < s[0] - 1e-10) {
                    bad.push(format!("ascent broken for {map} [{k}]"));
                }
            }
            if caps.windows(2).any(|c| c[1].capacity_bits > c[0].capacity_bits + 2e-9) {
                bad.push(format!("lag capacity grew for {map} [{k}]"));
            }
            checked += 1;
        }
    }

    let args = [
        "invariant", "--map", "logistic", "--kernel", "gaussian:0.1:reflect", "--bins", "128", "--mc-steps", "10000",
        "--seed", "42",
    ];
    let runs: Vec<String> = (0..2)
        .map(|i| {
            let out = Command::new(env!("CARGO_BIN_EXE_ergokit"))
                .args(args)
                .env("ERGOKIT_THREADS", if i == 0 { "1" } else { "0" })
                .env("RUST_LOG", "error")
                .output()
                .unwrap();
            assert!(out.status.success());
            String::from_utf8(out.stdout).unwrap().lines().filter(|l| !l.contains("\"wall_time_ms\"")).collect()
        })
        .collect();
    if runs[0] != runs[1] {
        bad.push("CLI output differs between identical runs".into());
    }
    let ok = bad.is_empty();
    (ok, if ok { format!("{checked} systems, CLI output byte-identical across runs") } else { bad.join("; ") })
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("memory scaling of the identity map", memory_scaling_identity),
        ("kernel entropy against closed forms", entropy_closed_forms),
        ("ergodic decomposition", ergodic_decomposition),
        ("Ulam and Legendre stationary measures agree", representation_equivalence),
        ("matrix powers on reversible chains", matrix_power_corpus),
        ("spectral gap soundness", gap_soundness),
        ("closed-form oracles", closed_form_oracles),
        ("invariant suites", invariant_suites),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (ok, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        println!("criterion {} ({name}): {} ({detail})", i + 1, if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    println!("acceptance: {} of 8 passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
