//! Closed forms and brute-force references, and the `selftest` suite built on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::freeze::{freeze_feedback, FreezeParams};
use crate::ldp::estimate_survival;
use crate::measure::{
    wasserstein_1d, wasserstein_assignment, ConstraintFunctional, EmpiricalMeasure, GridMeasure1D,
    Integrand, Measure1D, MeasureFunctional,
};
use crate::mfsolver::{fp_forward, heat_apply, hjb_backward, HjbData, SpaceTimeGrid};
use crate::model::{legendre_check, QuadraticHamiltonian, QuadraticLagrangian, ZeroDrift};
use crate::particle::{InitialState, SimConfig};
use crate::special::normal_cdf;

/// Minimum of `Σ_i cost[i·n + σ(i)]` over all permutations `σ` (Heap's algorithm).
pub fn exhaustive_assignment(cost: &[f64], n: usize) -> f64 {
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| {
        p.iter()
            .enumerate()
            .map(|(i, &j)| cost[i * n + j])
            .sum::<f64>()
    };
    let mut best = total(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(total(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// `d_p` between two uniform clouds of equal size by enumerating all couplings.
pub fn exhaustive_wasserstein(a: &EmpiricalMeasure, b: &EmpiricalMeasure, p: u32) -> f64 {
    let n = a.len();
    let mut cost = Vec::with_capacity(n * n);
    for x in a.points() {
        for y in b.points() {
            let sq: f64 = x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum();
            cost.push(sq.sqrt().powi(p as i32));
        }
    }
    (exhaustive_assignment(&cost, n) / n as f64).powf(1.0 / p as f64)
}

/// `ℙ(sup_{s ≤ t} √2 W_s < κ) = 2Φ(κ/√(2t)) − 1`.
pub fn reflection_survival(kappa: f64, t: f64) -> f64 {
    2.0 * normal_cdf(kappa / (2.0 * t).sqrt()) - 1.0
}

/// Unconstrained value `−2 log E[e^{−g(x + √(2t) Z)/2}]` by trapezoid quadrature on `|z| ≤ 10`.
pub fn hopf_cole(g: impl Fn(f64) -> f64, x: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return g(x);
    }
    let s = (2.0 * t).sqrt();
    let m = 4000;
    let h = 20.0 / m as f64;
    let mut acc = 0.0;
    for i in 0..=m {
        let z = -10.0 + i as f64 * h;
        let w = if i == 0 || i == m { 0.5 } else { 1.0 };
        acc += w * (-0.5 * z * z - 0.5 * g(x + s * z)).exp();
    }
    -2.0 * (acc * h / (2.0 * std::f64::consts::PI).sqrt()).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

fn heat_moment() -> Check {
    let (n, lo, hi, t) = (400, -10.0, 10.0, 0.3);
    let dx = (hi - lo) / n as f64;
    let xs: Vec<f64> = (0..n).map(|i| lo + (i as f64 + 0.5) * dx).collect();
    let f: Vec<f64> = xs.iter().map(|x| x * x).collect();
    let out = heat_apply(&f, dx, t);
    let err = xs
        .iter()
        .zip(&out)
        .filter(|(x, _)| x.abs() < 5.0)
        .map(|(x, v)| (v - x * x - 2.0 * t).abs())
        .fold(0.0, f64::max);
    check(
        "heat semigroup on x^2",
        err < 1e-6,
        format!("max interior error {err:.3e}"),
    )
}

fn hopf_cole_check() -> Check {
    let run = || -> Result<f64, String> {
        let grid = SpaceTimeGrid::new(-6.0, 6.0, 400, 0.0, 1.0, 2000).map_err(|e| e.to_string())?;
        let g = Integrand::SoftCappedSquare {
            cap: 4.0,
            softness: 0.05,
        };
        let xs = grid.centers();
        let terminal: Vec<f64> = xs.iter().map(|&x| g.value(&[x])).collect();
        let source = vec![vec![0.0; xs.len()]; grid.n_steps];
        let data = HjbData {
            terminal: &terminal,
            source: &source,
            drift: &[],
            coupling: None,
        };
        let vf = hjb_backward(&data, &QuadraticHamiltonian::default(), &grid)
            .map_err(|e| e.to_string())?;
        let mut err = 0.0f64;
        for k in [0, grid.n_steps / 2, grid.n_steps - 1] {
            let t_left = grid.horizon - grid.time(k);
            for (i, &x) in xs.iter().enumerate() {
                if x.abs() <= 3.0 {
                    err = err.max((vf.u[k][i] - hopf_cole(|y| g.value(&[y]), x, t_left)).abs());
                }
            }
        }
        Ok(err)
    };
    match run() {
        Ok(err) => check(
            "backward equation vs Hopf-Cole",
            err < 1e-3,
            format!("sup error {err:.3e}"),
        ),
        Err(e) => check("backward equation vs Hopf-Cole", false, e),
    }
}

fn fp_check() -> Check {
    let run = || -> Result<(f64, f64), String> {
        let grid =
            SpaceTimeGrid::new(-10.0, 10.0, 400, 0.0, 1.5, 1000).map_err(|e| e.to_string())?;
        let mu0 = GridMeasure1D::gaussian(-10.0, 10.0, 400, 0.0, 0.5).map_err(|e| e.to_string())?;
        let flow = fp_forward(&mu0, &grid, |_, _, v| v.iter_mut().for_each(|x| *x = 0.0))
            .map_err(|e| e.to_string())?;
        let last = flow.flow.last().expect("non-empty flow");
        let target = mu0.variance() + 2.0 * grid.horizon;
        let var_err = (last.variance() - target).abs() / target;
        Ok(((last.mass() - 1.0).abs(), var_err))
    };
    match run() {
        Ok((mass, var)) => check(
            "forward equation mass and variance",
            mass < 1e-9 && var < 1e-3,
            format!("mass error {mass:.2e}, relative variance error {var:.2e}"),
        ),
        Err(e) => check("forward equation mass and variance", false, e),
    }
}

fn transport_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut err_1d = 0.0f64;
    for _ in 0..200 {
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (ea, eb) = (
            EmpiricalMeasure::from_scalars(&a).unwrap(),
            EmpiricalMeasure::from_scalars(&b).unwrap(),
        );
        for p in [1, 2] {
            let q = wasserstein_1d(Measure1D::Samples(&a), Measure1D::Samples(&b), p).unwrap();
            err_1d = err_1d.max((q - exhaustive_wasserstein(&ea, &eb, p)).abs());
        }
    }
    let mut err_2d = 0.0f64;
    for _ in 0..200 {
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (ea, eb) = (
            EmpiricalMeasure::new(2, a).unwrap(),
            EmpiricalMeasure::new(2, b).unwrap(),
        );
        for p in [1, 2] {
            let h = wasserstein_assignment(&ea, &eb, p).unwrap();
            err_2d = err_2d.max((h - exhaustive_wasserstein(&ea, &eb, p)).abs());
        }
    }
    vec![
        check(
            "1D quantile coupling vs all couplings",
            err_1d < 1e-9,
            format!("max error {err_1d:.2e}"),
        ),
        check(
            "assignment vs all couplings (2D)",
            err_2d < 1e-12,
            format!("max error {err_2d:.2e}"),
        ),
    ]
}

fn freeze_check(rng: &mut ChaCha8Rng) -> Check {
    // N = d = 1 and r = 1: β = 4y/(y² − 1) − 2y
    let mut params = FreezeParams::new(4.0, 1.0).expect("valid parameters");
    params
        .set_anchor(&EmpiricalMeasure::from_scalars(&[0.0]).unwrap())
        .expect("first anchor");
    let mut err = 0.0f64;
    for _ in 0..100 {
        let y: f64 = rng.random_range(-0.99..0.99);
        let beta = freeze_feedback(
            &EmpiricalMeasure::from_scalars(&[y]).unwrap(),
            &params,
            &ZeroDrift,
        )
        .unwrap();
        err = err.max((beta[0] - (4.0 * y / (y * y - 1.0) - 2.0 * y)).abs());
    }
    check(
        "confinement feedback closed form",
        err < 1e-12,
        format!("max error {err:.2e}"),
    )
}

fn reflection_check(seed: u64) -> Check {
    let (kappa, t, runs) = (1.0, 0.5, 4000);
    let id = Integrand::Affine {
        coeffs: vec![1.0],
        offset: 0.0,
    };
    let psi = ConstraintFunctional::with_lipschitz(MeasureFunctional::linear(id, kappa), 1.0);
    let cfg = SimConfig::new(
        1,
        1,
        1e-4,
        0.0,
        t,
        seed,
        InitialState::GaussianQuantiles {
            mean: 0.0,
            std: 0.0,
        },
    );
    match estimate_survival(&cfg, &ZeroDrift, &psi, runs) {
        Ok(est) => {
            let exact = reflection_survival(kappa, t);
            let se = (exact * (1.0 - exact) / runs as f64).sqrt();
            let z = (est.v_hat - exact) / se;
            check(
                "single-particle survival vs reflection",
                z.abs() < 3.0,
                format!("v_hat {:.4}, exact {exact:.4}, z {z:.2}", est.v_hat),
            )
        }
        Err(e) => check(
            "single-particle survival vs reflection",
            false,
            e.to_string(),
        ),
    }
}

fn legendre() -> Check {
    match legendre_check(
        &QuadraticHamiltonian::default(),
        &QuadraticLagrangian::default(),
        2,
        64,
    ) {
        Ok(gap) => check(
            "quadratic Legendre pair",
            gap < 1e-9,
            format!("max gap {gap:.2e}"),
        ),
        Err(e) => check("quadratic Legendre pair", false, e.to_string()),
    }
}

/// Runs every oracle check; random instances are drawn from `seed`.
pub fn selftest(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![heat_moment(), hopf_cole_check(), fp_check()];
    out.extend(transport_checks(&mut rng));
    out.push(freeze_check(&mut rng));
    out.push(reflection_check(seed));
    out.push(legendre());
    out
}
