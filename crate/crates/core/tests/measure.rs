mod common;

use common::lp_transport_cost;
use mfc_lab::measure::{
    wasserstein_1d, wasserstein_assignment, ConstraintFunctional, EmpiricalMeasure, GridMeasure1D,
    Integrand, Measure1D, MeasureFunctional, MeasureRef, OuterFunction,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn cloud(n: usize, d: usize) -> impl Strategy<Value = EmpiricalMeasure> {
    prop::collection::vec(-3.0f64..3.0, n * d)
        .prop_map(move |v| EmpiricalMeasure::new(d, v).unwrap())
}

fn same_size(
    lo: f64,
    hi: f64,
    len: std::ops::Range<usize>,
) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    len.prop_flat_map(move |n| {
        (
            prop::collection::vec(lo..hi, n),
            prop::collection::vec(lo..hi, n),
        )
    })
}

fn shipped_psi() -> ConstraintFunctional {
    ConstraintFunctional::linear(
        Integrand::SmoothNorm {
            center: vec![0.0],
            smoothing: 0.1,
        },
        0.7,
        &[-8.0],
        &[8.0],
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn quantile_coupling_matches_lp((a, b) in same_size(-5.0, 5.0, 1..9)) {
        for p in [1u32, 2] {
            let q = wasserstein_1d(Measure1D::Samples(&a), Measure1D::Samples(&b), p).unwrap();
            let lp = lp_transport_cost(&a, &b, p as i32).powf(1.0 / p as f64);
            prop_assert!((q - lp).abs() < 1e-9, "p = {}: quantile {} vs LP {}", p, q, lp);
        }
    }

    #[test]
    fn assignment_is_a_metric(x in cloud(5, 2), y in cloud(5, 2), z in cloud(5, 2)) {
        for p in [1u32, 2] {
            let xy = wasserstein_assignment(&x, &y, p).unwrap();
            let yx = wasserstein_assignment(&y, &x, p).unwrap();
            let yz = wasserstein_assignment(&y, &z, p).unwrap();
            let xz = wasserstein_assignment(&x, &z, p).unwrap();
            prop_assert!((xy - yx).abs() < 1e-12);
            prop_assert!(xz <= xy + yz + 1e-12);
            prop_assert!(wasserstein_assignment(&x, &x, p).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn identity_coupling_bounds_d2(x in cloud(7, 3), y in cloud(7, 3)) {
        let d2 = wasserstein_assignment(&x, &y, 2).unwrap();
        prop_assert!(d2 <= x.mean_squared_displacement(&y).sqrt() + 1e-12);
        let d1 = wasserstein_assignment(&x, &y, 1).unwrap();
        prop_assert!(d1 <= x.mean_displacement(&y) + 1e-12);
    }

    #[test]
    fn constraint_is_lipschitz_in_d1((a, b) in same_size(-8.0, 8.0, 1..20)) {
        let psi = shipped_psi();
        let (ma, mb) = (EmpiricalMeasure::from_scalars(&a).unwrap(), EmpiricalMeasure::from_scalars(&b).unwrap());
        let diff = (psi.value(MeasureRef::Empirical(&ma)) - psi.value(MeasureRef::Empirical(&mb))).abs();
        let d1 = wasserstein_1d(Measure1D::Samples(&a), Measure1D::Samples(&b), 1).unwrap();
        prop_assert!(diff <= psi.lipschitz() * d1 + 1e-12);
    }

    #[test]
    fn flat_derivative_integrates_to_zero(
        pts in prop::collection::vec(-4.0f64..4.0, 2..30),
        w in prop::collection::vec(0.1f64..2.0, 2),
    ) {
        let m = EmpiricalMeasure::from_scalars(&pts).unwrap();
        let cyl = MeasureFunctional::Cylindrical {
            outer: OuterFunction::HalfSquares { weights: w, offset: 0.3 },
            inner: vec![Integrand::Tanh, Integrand::SmoothNorm { center: vec![0.5], smoothing: 0.2 }],
        };
        let lin = MeasureFunctional::linear(Integrand::SmoothNorm { center: vec![], smoothing: 0.1 }, 1.0);
        for f in [cyl, lin] {
            let total: f64 = pts.iter().map(|x| f.flat_derivative(MeasureRef::Empirical(&m), &[*x])).sum::<f64>()
                / pts.len() as f64;
            prop_assert!(total.abs() < 1e-10, "{}", total);
        }
    }
}

#[test]
fn quantile_coupling_matches_lp_on_eight_point_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let normal = Normal::new(0.0, 2.0).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let a: Vec<f64> = (0..8).map(|_| normal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..8).map(|_| normal.sample(&mut rng)).collect();
        let q = wasserstein_1d(Measure1D::Samples(&a), Measure1D::Samples(&b), 2).unwrap();
        worst = worst.max((q - lp_transport_cost(&a, &b, 2).sqrt()).abs());
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn constraint_on_gaussian_grid_matches_monte_carlo() {
    let psi = shipped_psi();
    let grid = GridMeasure1D::gaussian(-10.0, 10.0, 4000, 0.3, 1.0).unwrap();
    let on_grid = psi.value(MeasureRef::Grid(&grid));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = Normal::new(0.3, 1.0).unwrap();
    let m = 1_000_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..m {
        let v = (normal.sample(&mut rng) as f64).hypot(0.1) - 0.1;
        s += v;
        s2 += v * v;
    }
    let mean = s / m as f64;
    let se = ((s2 / m as f64 - mean * mean) / m as f64).sqrt();
    let mc = mean - 0.7;
    assert!(
        (on_grid - mc).abs() < 3.0 * se,
        "grid {on_grid}, MC {mc} ± {se}"
    );
}

#[test]
fn flat_derivative_matches_mixture_finite_difference() {
    let pts = [-1.2, -0.3, 0.4, 0.9, 2.0];
    let m = EmpiricalMeasure::from_scalars(&pts).unwrap();
    let f = MeasureFunctional::Cylindrical {
        outer: OuterFunction::HalfSquares {
            weights: vec![1.5, 0.7],
            offset: 0.0,
        },
        inner: vec![
            Integrand::Tanh,
            Integrand::SmoothNorm {
                center: vec![0.2],
                smoothing: 0.3,
            },
        ],
    };
    let y = f.integrals(MeasureRef::Empirical(&m));
    let h = 1e-5;
    for x in [-2.0, 0.0, 0.7, 3.0] {
        let mixed: Vec<f64> = f
            .integrands()
            .iter()
            .zip(&y)
            .map(|(g, yj)| (1.0 - h) * yj + h * g.value(&[x]))
            .collect();
        let fd = (f.value_from_integrals(&mixed) - f.value_from_integrals(&y)) / h;
        let exact = f.flat_derivative(MeasureRef::Empirical(&m), &[x]);
        assert!(
            (fd - exact).abs() < 1e-4 * exact.abs().max(1.0),
            "x = {x}: {fd} vs {exact}"
        );
    }
}
