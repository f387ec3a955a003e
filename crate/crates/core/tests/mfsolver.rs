mod common;

use std::sync::{Arc, OnceLock};

use mfc_lab::measure::{
    ConstraintFunctional, GridMeasure1D, Integrand, MeasureFunctional, MeasureRef,
};
use mfc_lab::mfsolver::{solve_mfoc, MfSolution, SolverOptions, SpaceTimeGrid};
use mfc_lab::model::{MeanFieldCost, ModelSpec, ZeroDrift};

const DELTA: f64 = 0.2;

fn shipped() -> &'static (ModelSpec, MfSolution) {
    static CELL: OnceLock<(ModelSpec, MfSolution)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = common::shipped_config("shipped_1d.toml");
        let model = cfg.build_model().unwrap();
        let (grid, mu0) = cfg.build_grid().unwrap();
        let sol = solve_mfoc(&model, &mu0, DELTA, &cfg.solver.options(), &grid).unwrap();
        assert!(sol.residuals.converged);
        (model, sol)
    })
}

#[test]
fn flow_conserves_mass_and_stays_nonnegative() {
    let (_, sol) = shipped();
    for m in &sol.flow {
        assert!((m.mass() - 1.0).abs() < 1e-9, "mass {}", m.mass());
        assert!(m.density().iter().all(|v| *v >= 0.0));
    }
    assert!(sol.residuals.clipped_mass.is_finite());
}

#[test]
fn value_recomputes_from_parts() {
    let (model, sol) = shipped();
    assert!((sol.value - sol.value_from_parts(model)).abs() < 1e-10);
}

#[test]
fn multipliers_are_nonnegative_and_supported_near_the_constraint() {
    let (model, sol) = shipped();
    let vf = &sol.value_field;
    assert!(vf.eta >= 0.0);
    assert!(vf.nu.iter().all(|v| *v >= 0.0));
    assert!(
        vf.nu.iter().any(|v| *v > 0.0),
        "constraint should be active"
    );
    for (k, nu) in vf.nu.iter().enumerate() {
        let slack = model.constraint.value(MeasureRef::Grid(&sol.flow[k])) + DELTA;
        if slack < -sol.eps {
            assert_eq!(*nu, 0.0, "slice {k}: Ψ + δ = {slack}");
        }
    }
}

/// `−2 log ∫ e^{−g(x + √2 z)/2} φ(z) dz` by the trapezoid rule.
fn hopf_cole_value(g: &Integrand, x: f64) -> f64 {
    let (m, h) = (6000, 24.0 / 6000.0);
    let mut acc = 0.0;
    for i in 0..=m {
        let z = -12.0 + i as f64 * h;
        let w = if i == 0 || i == m { 0.5 } else { 1.0 };
        acc += w * (-0.5 * z * z - 0.5 * g.value(&[x + 2f64.sqrt() * z])).exp();
    }
    -2.0 * (acc * h / (2.0 * std::f64::consts::PI).sqrt()).ln()
}

#[test]
fn unconstrained_linear_terminal_cost_matches_hopf_cole() {
    let g = Integrand::SoftCappedSquare {
        cap: 4.0,
        softness: 0.05,
    };
    let psi = ConstraintFunctional::with_lipschitz(
        MeasureFunctional::linear(
            Integrand::SmoothNorm {
                center: vec![],
                smoothing: 0.1,
            },
            1e3,
        ),
        1.0,
    );
    let terminal = MeanFieldCost(Some(MeasureFunctional::linear(g.clone(), 0.0)));
    let model = ModelSpec::quadratic(
        Arc::new(ZeroDrift),
        MeanFieldCost::zero(),
        terminal,
        psi,
        0.0,
        1.0,
    )
    .unwrap();
    let grid = SpaceTimeGrid::new(-8.0, 8.0, 256, 0.0, 1.0, 400).unwrap();
    let mu0 = GridMeasure1D::gaussian(-8.0, 8.0, 256, 0.5, 0.7).unwrap();
    let sol = solve_mfoc(&model, &mu0, 0.1, &SolverOptions::default(), &grid).unwrap();
    assert!(sol.residuals.converged);
    let exact = mu0.integrate(|x| hopf_cole_value(&g, x));
    assert!(
        (sol.value - exact).abs() < 2e-3,
        "U = {}, Hopf-Cole {exact}",
        sol.value
    );
}

#[test]
fn control_regularity_is_stable_under_refinement() {
    let (model, base) = shipped();
    let cfg = common::shipped_config("shipped_1d.toml");
    let solve = |cells: usize, steps: usize| {
        let grid = SpaceTimeGrid::new(-8.0, 8.0, cells, 0.0, 1.0, steps).unwrap();
        let mu0 = GridMeasure1D::gaussian(-8.0, 8.0, cells, 0.0, 0.2).unwrap();
        let sol = solve_mfoc(model, &mu0, DELTA, &cfg.solver.options(), &grid).unwrap();
        assert!(sol.residuals.converged);
        sol
    };
    let coarse = solve(128, 100);
    let fine = solve(512, 800);
    let levels = [
        coarse.control_regularity(),
        base.control_regularity(),
        fine.control_regularity(),
    ];
    println!("(sup |α|, Lipschitz) at 128, 256, 512 cells: {levels:?}");
    for (s, l) in levels {
        assert!(s.is_finite() && l.is_finite());
        assert!(
            (s - levels[2].0).abs() < 0.01 * levels[2].0,
            "sup |α| drifts: {levels:?}"
        );
    }
    let (d1, d2) = (
        (levels[1].1 - levels[0].1).abs(),
        (levels[2].1 - levels[1].1).abs(),
    );
    assert!(
        d2 < d1,
        "Lipschitz proxy increments do not contract: {d1} then {d2}"
    );
    assert!(
        (fine.value - base.value).abs() < 1e-3,
        "U: {} vs {}",
        base.value,
        fine.value
    );
}

#[test]
fn penalty_refinement_is_monitored() {
    let (model, _) = shipped();
    let cfg = common::shipped_config("shipped_1d.toml");
    let (grid, mu0) = cfg.build_grid().unwrap();
    let mut values = Vec::new();
    for eps in [4e-3, 2e-3, 1e-3] {
        let opts = SolverOptions {
            eps,
            ..cfg.solver.options()
        };
        let sol = solve_mfoc(model, &mu0, DELTA, &opts, &grid).unwrap();
        assert!(sol.residuals.converged);
        values.push(sol.value);
    }
    let increments: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    println!("U at eps 4e-3, 2e-3, 1e-3: {values:?}; increments {increments:?}");
    assert!(increments.iter().all(|d| d.is_finite()));
}
