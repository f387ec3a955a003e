use mfc_lab::ldp::{estimate_survival, rate_estimate, sized_survival, PilotRule, SurvivalEstimate};
use mfc_lab::measure::{ConstraintFunctional, Integrand, MeasureFunctional};
use mfc_lab::model::ZeroDrift;
use mfc_lab::particle::{InitialState, SimConfig};
use proptest::prelude::*;

fn psi() -> ConstraintFunctional {
    let f = Integrand::SmoothNorm {
        center: vec![],
        smoothing: 0.1,
    };
    ConstraintFunctional::with_lipschitz(MeasureFunctional::linear(f, 1.0), 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn rate_is_antitone_in_survival(v1 in 1e-300f64..1.0, v2 in 1e-300f64..1.0, n in 1usize..500) {
        let (lo, hi) = if v1 <= v2 { (v1, v2) } else { (v2, v1) };
        prop_assert!(rate_estimate(lo, n).unwrap() >= rate_estimate(hi, n).unwrap());
    }

    #[test]
    fn pooled_survival_is_the_weighted_mean(
        parts in prop::collection::vec((1u64..10_000).prop_flat_map(|m| (0..=m, Just(m))), 1..6),
    ) {
        let ests: Vec<SurvivalEstimate> =
            parts.iter().map(|&(s, m)| SurvivalEstimate::from_counts(3, s, m)).collect();
        let pooled = SurvivalEstimate::pool(&ests).unwrap();
        let total: u64 = parts.iter().map(|p| p.1).sum();
        let successes: u64 = parts.iter().map(|p| p.0).sum();
        prop_assert_eq!(pooled.runs, total);
        prop_assert_eq!(pooled.successes, successes);
        prop_assert_eq!(pooled.v_hat, successes as f64 / total as f64);
        let weighted: f64 = ests.iter().map(|e| e.v_hat * e.runs as f64).sum::<f64>() / total as f64;
        prop_assert!((pooled.v_hat - weighted).abs() <= 1e-15);
    }
}

#[test]
fn estimates_are_reproducible_under_a_seed() {
    let cfg = SimConfig::new(
        4,
        1,
        0.01,
        0.0,
        1.0,
        12,
        InitialState::GaussianQuantiles {
            mean: 0.0,
            std: 0.2,
        },
    );
    let a = estimate_survival(&cfg, &ZeroDrift, &psi(), 500).unwrap();
    let b = estimate_survival(&cfg, &ZeroDrift, &psi(), 500).unwrap();
    assert_eq!(a, b);
    let rule = PilotRule {
        pilot_runs: 200,
        target_successes: 50.0,
        min_runs: 300,
        max_runs: 100_000,
    };
    assert_eq!(
        sized_survival(&cfg, &ZeroDrift, &psi(), &rule).unwrap(),
        sized_survival(&cfg, &ZeroDrift, &psi(), &rule).unwrap()
    );
    let other = SimConfig { seed: 13, ..cfg };
    let c = estimate_survival(&other, &ZeroDrift, &psi(), 500).unwrap();
    assert!(
        c.v_hat > 0.0 && c.v_hat < 1.0 && a.v_hat > 0.0 && a.v_hat < 1.0,
        "{} {}",
        a.v_hat,
        c.v_hat
    );
}
