use mfc_lab::model::{
    Hamiltonian, Lagrangian, LegendreLagrangian, QuadraticHamiltonian, QuadraticLagrangian,
    TiltedHamiltonian,
};
use proptest::prelude::*;

fn perspective(l: &dyn Lagrangian, x: f64, a: f64, b: f64) -> f64 {
    l.value(&[x], &[a / b]) * b
}

fn central(f: impl Fn(f64) -> f64, v: f64) -> f64 {
    let h = 1e-5 * v.abs().max(1.0);
    (f(v + h) - f(v - h)) / (2.0 * h)
}

fn close(fd: f64, exact: f64) -> bool {
    (fd - exact).abs() <= 1e-6 * exact.abs().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn perspective_is_midpoint_convex(
        x in -3.0f64..3.0,
        a1 in -5.0f64..5.0, b1 in 0.05f64..5.0,
        a2 in -5.0f64..5.0, b2 in 0.05f64..5.0,
    ) {
        let pairs: [Box<dyn Lagrangian>; 2] = [
            Box::new(QuadraticLagrangian::default()),
            Box::new(LegendreLagrangian::new(TiltedHamiltonian { eps: 0.3 })),
        ];
        for l in &pairs {
            let mid = perspective(l.as_ref(), x, 0.5 * (a1 + a2), 0.5 * (b1 + b2));
            let avg = 0.5 * (perspective(l.as_ref(), x, a1, b1) + perspective(l.as_ref(), x, a2, b2));
            prop_assert!(mid <= avg + 1e-9 * avg.abs().max(1.0), "{} > {}", mid, avg);
        }
    }

    #[test]
    fn gradients_match_finite_differences(x in -3.0f64..3.0, p in -4.0f64..4.0) {
        let hs: [Box<dyn Hamiltonian>; 2] =
            [Box::new(QuadraticHamiltonian { shift: 0.4 }), Box::new(TiltedHamiltonian { eps: 0.3 })];
        for h in &hs {
            let mut g = [0.0];
            h.grad_p(&[x], &[p], &mut g);
            prop_assert!(close(central(|v| h.value(&[x], &[v]), p), g[0]));
            h.grad_x(&[x], &[p], &mut g);
            prop_assert!(close(central(|v| h.value(&[v], &[p]), x), g[0]));
        }
        let ls: [Box<dyn Lagrangian>; 2] = [
            Box::new(QuadraticLagrangian { shift: 0.4 }),
            Box::new(LegendreLagrangian::new(TiltedHamiltonian { eps: 0.3 })),
        ];
        for l in &ls {
            let mut g = [0.0];
            l.grad_q(&[x], &[p], &mut g);
            prop_assert!(close(central(|v| l.value(&[x], &[v]), p), g[0]), "{:?}", l);
        }
    }

    #[test]
    fn quadratic_grad_p_is_identity(p in prop::collection::vec(-1e3f64..1e3, 3), x in prop::collection::vec(-5.0f64..5.0, 3)) {
        let mut g = [0.0; 3];
        QuadraticHamiltonian::default().grad_p(&x, &p, &mut g);
        prop_assert_eq!(&g[..], &p[..]);
    }
}
