//! Problem data: Hamiltonian/Lagrangian pair, mean-field drift, mean-field
//! costs and the constraint, bundled into a validated [`ModelSpec`].

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::measure::{ConstraintFunctional, EmpiricalMeasure, MeasureFunctional, MeasureRef};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("need 0 <= t0 < T, got t0 = {t0}, T = {horizon}")]
    BadHorizon { t0: f64, horizon: f64 },
    #[error("Newton did not converge for Legendre sample {sample} (x = {x:?}, q = {q:?})")]
    NewtonFailed {
        sample: usize,
        x: Vec<f64>,
        q: Vec<f64>,
    },
    #[error("Legendre duality gap {gap:e} exceeds {tol:e}")]
    DualityGap { gap: f64, tol: f64 },
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// `H(x, p)`, strictly convex in `p`.
pub trait Hamiltonian: Send + Sync + Debug {
    fn value(&self, x: &[f64], p: &[f64]) -> f64;
    fn grad_p(&self, x: &[f64], p: &[f64], out: &mut [f64]);
    fn grad_x(&self, x: &[f64], p: &[f64], out: &mut [f64]);
    /// Bounds `(μ_lo, μ_hi)` on the spectrum of `D²_pp H`.
    fn convexity_bounds(&self) -> (f64, f64);
}

/// `L(x, q) = sup_p { −p·q − H(x, p) }`.
pub trait Lagrangian: Send + Sync + Debug {
    fn value(&self, x: &[f64], q: &[f64]) -> f64;
    fn grad_q(&self, x: &[f64], q: &[f64], out: &mut [f64]);
}

/// `H(x,p) = ½|p|² + c`.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuadraticHamiltonian {
    pub shift: f64,
}

impl Hamiltonian for QuadraticHamiltonian {
    fn value(&self, _x: &[f64], p: &[f64]) -> f64 {
        0.5 * p.iter().map(|v| v * v).sum::<f64>() + self.shift
    }
    fn grad_p(&self, _x: &[f64], p: &[f64], out: &mut [f64]) {
        out.copy_from_slice(p);
    }
    fn grad_x(&self, _x: &[f64], _p: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn convexity_bounds(&self) -> (f64, f64) {
        (1.0, 1.0)
    }
}

/// `L(x,q) = ½|q|² − c`, dual of [`QuadraticHamiltonian`] with the same shift.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuadraticLagrangian {
    pub shift: f64,
}

impl Lagrangian for QuadraticLagrangian {
    fn value(&self, _x: &[f64], q: &[f64]) -> f64 {
        0.5 * q.iter().map(|v| v * v).sum::<f64>() - self.shift
    }
    fn grad_q(&self, _x: &[f64], q: &[f64], out: &mut [f64]) {
        out.copy_from_slice(q);
    }
}

/// `H(x,p) = ½|p|² + ε Σ_k sin(x_k) p_k`: a state-dependent tilt of the quadratic case.
#[derive(Debug, Clone, Copy)]
pub struct TiltedHamiltonian {
    pub eps: f64,
}

impl Hamiltonian for TiltedHamiltonian {
    fn value(&self, x: &[f64], p: &[f64]) -> f64 {
        p.iter()
            .zip(x)
            .map(|(pk, xk)| 0.5 * pk * pk + self.eps * xk.sin() * pk)
            .sum()
    }
    fn grad_p(&self, x: &[f64], p: &[f64], out: &mut [f64]) {
        for k in 0..p.len() {
            out[k] = p[k] + self.eps * x[k].sin();
        }
    }
    fn grad_x(&self, x: &[f64], p: &[f64], out: &mut [f64]) {
        for k in 0..p.len() {
            out[k] = self.eps * x[k].cos() * p[k];
        }
    }
    fn convexity_bounds(&self) -> (f64, f64) {
        (1.0, 1.0)
    }
}

/// Lagrangian obtained numerically from a Hamiltonian: coarse grid search over
/// `p`, refined by Newton on the concave inner problem.
#[derive(Debug, Clone)]
pub struct LegendreLagrangian<H> {
    pub hamiltonian: H,
    pub search_radius: f64,
}

impl<H: Hamiltonian> LegendreLagrangian<H> {
    pub fn new(hamiltonian: H) -> Self {
        Self {
            hamiltonian,
            search_radius: 20.0,
        }
    }

    fn maximizer(&self, x: &[f64], q: &[f64]) -> Vec<f64> {
        let d = q.len();
        // grid search per coordinate around −q (the quadratic-case answer)
        let mut p: Vec<f64> = q.iter().map(|v| -v).collect();
        let objective = |p: &[f64]| -dot(p, q) - self.hamiltonian.value(x, p);
        let mut best = objective(&p);
        let steps = 200;
        for k in 0..d {
            let base = p[k];
            for s in 0..=steps {
                let mut trial = p.clone();
                trial[k] =
                    base - self.search_radius + 2.0 * self.search_radius * s as f64 / steps as f64;
                let v = objective(&trial);
                if v > best {
                    best = v;
                    p = trial;
                }
            }
        }
        newton_maximizer(&self.hamiltonian, x, q, p).unwrap_or_else(|start| start)
    }
}

impl<H: Hamiltonian> Lagrangian for LegendreLagrangian<H> {
    fn value(&self, x: &[f64], q: &[f64]) -> f64 {
        let p = self.maximizer(x, q);
        -dot(&p, q) - self.hamiltonian.value(x, &p)
    }
    fn grad_q(&self, x: &[f64], q: &[f64], out: &mut [f64]) {
        // envelope theorem: ∂_q L = −p*
        let p = self.maximizer(x, q);
        for k in 0..q.len() {
            out[k] = -p[k];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Damped Newton for `max_p −p·q − H(x,p)`. On failure returns the last iterate as `Err`.
fn newton_maximizer(
    h: &dyn Hamiltonian,
    x: &[f64],
    q: &[f64],
    start: Vec<f64>,
) -> Result<Vec<f64>, Vec<f64>> {
    let d = q.len();
    let objective = |p: &[f64]| -dot(p, q) - h.value(x, p);
    let mut p = start;
    let mut g = vec![0.0; d];
    let mut gp = vec![0.0; d];
    for _ in 0..100 {
        h.grad_p(x, &p, &mut g);
        // residual of the first-order condition −q − ∂_p H = 0
        let resid: Vec<f64> = (0..d).map(|k| -q[k] - g[k]).collect();
        let norm = resid.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-13 * (1.0 + q.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            return Ok(p);
        }
        // Hessian of H in p by central differences of the gradient
        let eps = 1e-6;
        let mut hess = DMatrix::<f64>::zeros(d, d);
        for j in 0..d {
            let mut pp = p.clone();
            pp[j] += eps;
            h.grad_p(x, &pp, &mut gp);
            let mut pm = p.clone();
            pm[j] -= eps;
            let mut gm = vec![0.0; d];
            h.grad_p(x, &pm, &mut gm);
            for i in 0..d {
                hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * eps);
            }
        }
        let Some(step) = hess.lu().solve(&DVector::from_vec(resid)) else {
            return Err(p);
        };
        let f0 = objective(&p);
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = (0..d).map(|k| p[k] + t * step[k]).collect();
            if objective(&trial) >= f0 - 1e-14 * f0.abs().max(1.0) || t < 1e-8 {
                p = trial;
                break;
            }
            t *= 0.5;
        }
    }
    Err(p)
}

/// Largest sampled Legendre duality gap `|L(x,q) − (−p*·q − H(x,p*))|`.
///
/// Samples `x, q` uniformly in `[-3, 3]^dim` from a fixed seed.
pub fn legendre_check(
    h: &dyn Hamiltonian,
    l: &dyn Lagrangian,
    dim: usize,
    samples: usize,
) -> Result<f64, ModelError> {
    if samples == 0 {
        return Err(ModelError::Invalid(
            "legendre_check needs at least one sample".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x1e6e_4d2e);
    let mut worst = 0.0f64;
    for sample in 0..samples {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let start: Vec<f64> = q.iter().map(|v| -v).collect();
        let p = newton_maximizer(h, &x, &q, start).map_err(|_| ModelError::NewtonFailed {
            sample,
            x: x.clone(),
            q: q.clone(),
        })?;
        let sup = -dot(&p, &q) - h.value(&x, &p);
        worst = worst.max((l.value(&x, &q) - sup).abs());
    }
    Ok(worst)
}

/// Mean-field drift `b(x, m)`.
pub trait DriftField: Send + Sync + Debug {
    fn eval(&self, x: &[f64], m: MeasureRef<'_>, out: &mut [f64]);

    /// `‖b‖_∞`.
    fn sup_norm(&self) -> f64;

    /// Lipschitz constants in `x` and in `d_1`.
    fn lipschitz(&self) -> (f64, f64);

    fn depends_on_measure(&self) -> bool {
        false
    }

    /// `δb/δm(y, m, x)` written into `out`; returns `false` when the drift
    /// does not provide it (treated as zero).
    fn flat_derivative(&self, _y: &[f64], _m: MeasureRef<'_>, _x: &[f64], out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|o| *o = 0.0);
        false
    }

    /// Drift at every particle of `m`, row-major into `out`.
    fn eval_all(&self, m: &EmpiricalMeasure, out: &mut [f64]) {
        let d = m.dim();
        for (i, x) in m.points().enumerate() {
            self.eval(x, MeasureRef::Empirical(m), &mut out[i * d..(i + 1) * d]);
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDrift;

impl DriftField for ZeroDrift {
    fn eval(&self, _x: &[f64], _m: MeasureRef<'_>, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn sup_norm(&self) -> f64 {
        0.0
    }
    fn lipschitz(&self) -> (f64, f64) {
        (0.0, 0.0)
    }
    fn eval_all(&self, _m: &EmpiricalMeasure, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// `b(x) = −a tanh(x)` componentwise; no measure dependence.
#[derive(Debug, Clone, Copy)]
pub struct ConfinementDrift {
    pub strength: f64,
}

impl DriftField for ConfinementDrift {
    fn eval(&self, x: &[f64], _m: MeasureRef<'_>, out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = -self.strength * v.tanh();
        }
    }
    fn sup_norm(&self) -> f64 {
        self.strength.abs()
    }
    fn lipschitz(&self) -> (f64, f64) {
        (self.strength.abs(), 0.0)
    }
}

/// `b(x, m) = a ∫ tanh(y − x) dm(y)` componentwise: bounded mutual attraction.
#[derive(Debug, Clone, Copy)]
pub struct AttractionDrift {
    pub strength: f64,
}

impl DriftField for AttractionDrift {
    fn eval(&self, x: &[f64], m: MeasureRef<'_>, out: &mut [f64]) {
        for k in 0..x.len() {
            out[k] = self.strength * m.integrate(|y| (y[k] - x[k]).tanh());
        }
    }
    fn sup_norm(&self) -> f64 {
        self.strength.abs()
    }
    fn lipschitz(&self) -> (f64, f64) {
        (self.strength.abs(), self.strength.abs())
    }
    fn depends_on_measure(&self) -> bool {
        true
    }
    fn flat_derivative(&self, y: &[f64], m: MeasureRef<'_>, x: &[f64], out: &mut [f64]) -> bool {
        // b(y, m) = a ∫ tanh(z − y) dm(z)  ⇒  δb/δm(y, m, x) = a (tanh(x − y) − ∫ tanh(z − y) dm(z))
        for k in 0..y.len() {
            let mean = m.integrate(|z| (z[k] - y[k]).tanh());
            out[k] = self.strength * ((x[k] - y[k]).tanh() - mean);
        }
        true
    }
    fn eval_all(&self, m: &EmpiricalMeasure, out: &mut [f64]) {
        let d = m.dim();
        let n = m.len() as f64;
        for (i, x) in m.points().enumerate() {
            for k in 0..d {
                let s: f64 = m.points().map(|y| (y[k] - x[k]).tanh()).sum();
                out[i * d + k] = self.strength * s / n;
            }
        }
    }
}

/// Running or terminal mean-field cost; `None` is the zero cost.
#[derive(Debug, Clone, Default)]
pub struct MeanFieldCost(pub Option<MeasureFunctional>);

impl MeanFieldCost {
    pub fn zero() -> Self {
        Self(None)
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_none()
    }

    pub fn value(&self, m: MeasureRef<'_>) -> f64 {
        self.0.as_ref().map_or(0.0, |f| f.value(m))
    }

    pub fn flat_derivative(&self, m: MeasureRef<'_>, x: &[f64]) -> f64 {
        self.0.as_ref().map_or(0.0, |f| f.flat_derivative(m, x))
    }

    pub fn flat_derivative_1d(&self, m: MeasureRef<'_>, xs: &[f64]) -> Vec<f64> {
        match &self.0 {
            Some(f) => f.flat_derivative_1d(m, xs),
            None => vec![0.0; xs.len()],
        }
    }
}

/// One problem instance. Immutable once built.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub hamiltonian: Arc<dyn Hamiltonian>,
    pub lagrangian: Arc<dyn Lagrangian>,
    pub drift: Arc<dyn DriftField>,
    pub running_cost: MeanFieldCost,
    pub terminal_cost: MeanFieldCost,
    pub constraint: ConstraintFunctional,
    pub t0: f64,
    pub horizon: f64,
}

/// Gate applied to `(H, L)` pairs at load.
pub const LEGENDRE_TOLERANCE: f64 = 1e-6;

impl ModelSpec {
    /// Quadratic `H = ½|p|²`, `L = ½|q|²` with the given drift, costs and constraint.
    pub fn quadratic(
        drift: Arc<dyn DriftField>,
        running_cost: MeanFieldCost,
        terminal_cost: MeanFieldCost,
        constraint: ConstraintFunctional,
        t0: f64,
        horizon: f64,
    ) -> Result<Self, ModelError> {
        Self::new(
            Arc::new(QuadraticHamiltonian::default()),
            Arc::new(QuadraticLagrangian::default()),
            drift,
            running_cost,
            terminal_cost,
            constraint,
            t0,
            horizon,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        hamiltonian: Arc<dyn Hamiltonian>,
        lagrangian: Arc<dyn Lagrangian>,
        drift: Arc<dyn DriftField>,
        running_cost: MeanFieldCost,
        terminal_cost: MeanFieldCost,
        constraint: ConstraintFunctional,
        t0: f64,
        horizon: f64,
    ) -> Result<Self, ModelError> {
        if !(t0 >= 0.0 && t0 < horizon && horizon.is_finite()) {
            return Err(ModelError::BadHorizon { t0, horizon });
        }
        let gap = legendre_check(hamiltonian.as_ref(), lagrangian.as_ref(), 1, 16)?;
        if gap > LEGENDRE_TOLERANCE {
            return Err(ModelError::DualityGap {
                gap,
                tol: LEGENDRE_TOLERANCE,
            });
        }
        Ok(Self {
            hamiltonian,
            lagrangian,
            drift,
            running_cost,
            terminal_cost,
            constraint,
            t0,
            horizon,
        })
    }

    /// `(1/N) Σ L(x_i, α_i) + F(μ̂)`.
    pub fn particle_running_cost(&self, state: &EmpiricalMeasure, controls: &[f64]) -> f64 {
        particle_running_cost(state, controls, self)
    }
}

/// `(1/N) Σ_i L(x_i, α_i) + F(μ̂)` for a particle state and per-particle controls.
pub fn particle_running_cost(state: &EmpiricalMeasure, controls: &[f64], model: &ModelSpec) -> f64 {
    let d = state.dim();
    let n = state.len();
    debug_assert_eq!(controls.len(), n * d);
    let lag: f64 = state
        .points()
        .zip(controls.chunks_exact(d))
        .map(|(x, a)| model.lagrangian.value(x, a))
        .sum();
    lag / n as f64 + model.running_cost.value(MeasureRef::Empirical(state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::Integrand;

    fn unconstrained() -> ConstraintFunctional {
        ConstraintFunctional::linear(
            Integrand::SmoothNorm {
                center: vec![],
                smoothing: 0.1,
            },
            1e6,
            &[-1.0],
            &[1.0],
        )
    }

    #[test]
    fn quadratic_pair_is_self_dual() {
        let gap = legendre_check(
            &QuadraticHamiltonian::default(),
            &QuadraticLagrangian::default(),
            2,
            50,
        )
        .unwrap();
        assert!(gap < 1e-12, "{gap}");
        let gap = legendre_check(
            &QuadraticHamiltonian { shift: 0.7 },
            &QuadraticLagrangian { shift: 0.7 },
            3,
            50,
        )
        .unwrap();
        assert!(gap < 1e-12, "{gap}");
    }

    #[test]
    fn mismatched_pair_is_caught() {
        let gap = legendre_check(
            &QuadraticHamiltonian { shift: 0.5 },
            &QuadraticLagrangian::default(),
            1,
            4,
        )
        .unwrap();
        assert!((gap - 0.5).abs() < 1e-12);
        let err = ModelSpec::new(
            Arc::new(QuadraticHamiltonian { shift: 0.5 }),
            Arc::new(QuadraticLagrangian::default()),
            Arc::new(ZeroDrift),
            MeanFieldCost::zero(),
            MeanFieldCost::zero(),
            unconstrained(),
            0.0,
            1.0,
        );
        assert!(matches!(err, Err(ModelError::DualityGap { .. })));
    }

    #[test]
    fn tilted_pair_numeric_lagrangian() {
        let h = TiltedHamiltonian { eps: 0.3 };
        let l = LegendreLagrangian::new(h);
        let gap = legendre_check(&h, &l, 1, 40).unwrap();
        assert!(gap < 1e-6, "{gap}");
        // closed form: L(x,q) = ½ |q + ε sin x|²
        for &(x, q) in &[(0.3, -1.2), (2.0, 0.5), (-1.1, 2.5)] {
            let exact = 0.5 * (q + 0.3 * f64::sin(x)).powi(2);
            assert!((l.value(&[x], &[q]) - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn horizon_validation() {
        let r = ModelSpec::quadratic(
            Arc::new(ZeroDrift),
            MeanFieldCost::zero(),
            MeanFieldCost::zero(),
            unconstrained(),
            1.0,
            1.0,
        );
        assert!(matches!(r, Err(ModelError::BadHorizon { .. })));
    }

    #[test]
    fn running_cost_examples() {
        let model = ModelSpec::quadratic(
            Arc::new(ZeroDrift),
            MeanFieldCost::zero(),
            MeanFieldCost::zero(),
            unconstrained(),
            0.0,
            1.0,
        )
        .unwrap();
        let s = EmpiricalMeasure::from_scalars(&[0.3, -0.2]).unwrap();
        assert_eq!(particle_running_cost(&s, &[0.0, 0.0], &model), 0.0);
        assert_eq!(particle_running_cost(&s, &[1.0, -1.0], &model), 0.5);
    }

    #[test]
    fn attraction_derivative_is_normalized() {
        let b = AttractionDrift { strength: 0.8 };
        let m = EmpiricalMeasure::from_scalars(&[-0.4, 0.1, 0.9, 1.3]).unwrap();
        let mut out = [0.0];
        let total: f64 = m
            .points()
            .map(|x| {
                b.flat_derivative(&[0.25], (&m).into(), x, &mut out);
                out[0]
            })
            .sum();
        assert!(total.abs() < 1e-14);
        let mut all = vec![0.0; 4];
        b.eval_all(&m, &mut all);
        for (i, x) in m.points().enumerate() {
            b.eval(x, (&m).into(), &mut out);
            assert!((all[i] - out[0]).abs() < 1e-15);
        }
    }
}
