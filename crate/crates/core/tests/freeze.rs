mod common;

use std::sync::Arc;

use mfc_lab::freeze::{
    freeze_feedback, transfer_batch, transfer_control, FreezeError, FreezeParams, TransferOptions,
};
use mfc_lab::measure::{ConstraintFunctional, EmpiricalMeasure, Integrand, MeasureFunctional};
use mfc_lab::mfsolver::solve_mfoc;
use mfc_lab::model::{ConfinementDrift, DriftField, MeanFieldCost, ModelSpec, ZeroDrift};
use mfc_lab::particle::{mc_batch, ConstantPolicy, InitialState, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm_psi(kappa: f64, dim: usize) -> ConstraintFunctional {
    ConstraintFunctional::with_lipschitz(
        MeasureFunctional::linear(
            Integrand::SmoothNorm {
                center: vec![0.0; dim],
                smoothing: 0.1,
            },
            kappa,
        ),
        1.0,
    )
}

#[test]
fn unreachable_constraint_reproduces_plain_costs() {
    let drift: Arc<dyn DriftField> = Arc::new(ConfinementDrift { strength: 0.5 });
    let g = MeanFieldCost(Some(MeasureFunctional::linear(
        Integrand::HalfSquare { center: vec![] },
        0.0,
    )));
    let model =
        ModelSpec::quadratic(drift, MeanFieldCost::zero(), g, norm_psi(1e6, 2), 0.0, 1.0).unwrap();
    let cfg = SimConfig::new(
        8,
        2,
        0.01,
        0.0,
        1.0,
        3,
        InitialState::Sampled {
            mean: vec![0.0, 0.0],
            std: 0.5,
        },
    );
    let policy = ConstantPolicy(vec![0.3, -0.1]);
    let plain = mc_batch(&cfg, &model, &policy, 40, None).unwrap();
    let batch = transfer_batch(&cfg, &model, &policy, &TransferOptions::new(1.0, 1.0), 40).unwrap();
    assert_eq!(batch.records.len(), 40);
    for (rec, s) in batch.records.iter().zip(&plain.summaries) {
        assert!(rec.tau_index().is_none());
        assert_eq!(rec.total_cost(), s.total_cost);
        assert_eq!(rec.post_tau_energy, 0.0);
    }
    assert_eq!(batch.mean_cost, plain.aggregate.mean_cost);
    assert_eq!(batch.bound, 0.0);
    assert_eq!(batch.mean_post_tau_energy, 0.0);
}

#[test]
fn start_inside_the_margin_is_rejected() {
    let model = ModelSpec::quadratic(
        Arc::new(ZeroDrift),
        MeanFieldCost::zero(),
        MeanFieldCost::zero(),
        norm_psi(0.5, 1),
        0.0,
        1.0,
    )
    .unwrap();
    let cfg = SimConfig::new(
        4,
        1,
        0.01,
        0.0,
        1.0,
        3,
        InitialState::GaussianQuantiles {
            mean: 0.0,
            std: 0.0,
        },
    );
    // Ψ(δ_0) = −0.5 ≥ −δ/2 for δ = 1.2
    let err = transfer_control(
        &cfg,
        &model,
        &ConstantPolicy(vec![0.0]),
        &TransferOptions::new(1.2, 1.0),
        0,
    )
    .unwrap_err();
    assert!(matches!(err, FreezeError::Precondition { .. }));
}

/// `β_i = 4 z_i / (Σ_j |z_j|² − N r²) − (2d/r²) z_i − b(x_i, μ̂)` with `z = x − anchor`.
fn feedback_by_hand(
    x: &[f64],
    anchor: &[f64],
    d: usize,
    r: f64,
    drift: &dyn DriftField,
) -> Vec<f64> {
    let n = x.len() / d;
    let r2 = r * r;
    let mut s = 0.0;
    for j in 0..x.len() {
        s += (x[j] - anchor[j]) * (x[j] - anchor[j]);
    }
    let denom = s - r2 * n as f64;
    let m = EmpiricalMeasure::new(d, x.to_vec()).unwrap();
    let mut b = vec![0.0; x.len()];
    drift.eval_all(&m, &mut b);
    (0..x.len())
        .map(|j| {
            let z = x[j] - anchor[j];
            4.0 * z / denom - (2.0 * d as f64 / r2) * z - b[j]
        })
        .collect()
}

#[test]
fn feedback_agrees_bitwise_with_hand_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let drift = ConfinementDrift { strength: 0.7 };
    for _ in 0..100 {
        let n = rng.random_range(1..10usize);
        let d = rng.random_range(1..4usize);
        let delta = rng.random_range(0.1..3.0);
        let c_psi = rng.random_range(0.5..2.0);
        let mut params = FreezeParams::new(delta, c_psi).unwrap();
        let r = params.r();
        let anchor: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        params
            .set_anchor(&EmpiricalMeasure::new(d, anchor.clone()).unwrap())
            .unwrap();
        // displacement with confinement ratio in (0, 1)
        let dir: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let radius = rng.random_range(0.0..0.99f64).sqrt() * r * (n as f64).sqrt();
        let x: Vec<f64> = anchor
            .iter()
            .zip(&dir)
            .map(|(a, u)| a + u / norm * radius)
            .collect();
        let got = freeze_feedback(
            &EmpiricalMeasure::new(d, x.clone()).unwrap(),
            &params,
            &drift,
        )
        .unwrap();
        let want = feedback_by_hand(&x, &anchor, d, r, &drift);
        assert_eq!(got, want);
    }
}

#[test]
fn residual_time_vanishes_with_n() {
    let cfg = common::shipped_config("shipped_1d.toml");
    let model = cfg.build_model().unwrap();
    let (grid, mu0) = cfg.build_grid().unwrap();
    let delta = 0.2;
    let sol = solve_mfoc(&model, &mu0, delta, &cfg.solver.options(), &grid).unwrap();
    assert!(sol.residuals.converged);
    let alpha = sol.feedback();
    let opts = TransferOptions::new(delta, model.constraint.lipschitz());
    let mut gaps = Vec::new();
    for n in [16, 64, 256] {
        let sim = SimConfig::new(
            n,
            1,
            1e-3,
            0.0,
            1.0,
            5,
            InitialState::GaussianQuantiles {
                mean: 0.0,
                std: 0.2,
            },
        );
        let batch = transfer_batch(&sim, &model, &alpha, &opts, 100).unwrap();
        gaps.push(batch.mean_residual_time);
    }
    assert!(
        gaps[0] > gaps[1] && gaps[1] > gaps[2],
        "E[T - T∧τ] = {gaps:?}"
    );
}
