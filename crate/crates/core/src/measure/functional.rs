//! Functionals on probability measures and their flat derivatives.
//!
//! Every functional here is cylindrical: it depends on `m` only through a
//! finite vector of moments `y_j = ∫ f_j dm`. The flat derivative is then
//! `Σ_j ∂_j F(y) (f_j(x) − y_j)`, already normalized so that it integrates
//! to zero against `m`.

use std::fmt;
use std::sync::Arc;

use super::MeasureRef;

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// User-supplied integrand with its gradient.
#[derive(Clone)]
pub struct CustomIntegrand {
    pub name: String,
    pub value: ScalarFn,
    pub gradient: GradFn,
}

impl fmt::Debug for CustomIntegrand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomIntegrand")
            .field("name", &self.name)
            .finish()
    }
}

/// Pointwise integrands `ψ: ℝ^d → ℝ`. An empty `center` means the origin.
#[derive(Debug, Clone)]
pub enum Integrand {
    /// `√(|x − c|² + s²) − s`, a smoothed distance to `c`.
    SmoothNorm {
        center: Vec<f64>,
        smoothing: f64,
    },
    /// `a·x + b`.
    Affine {
        coeffs: Vec<f64>,
        offset: f64,
    },
    /// `½ |x − c|²`.
    HalfSquare {
        center: Vec<f64>,
    },
    /// Soft minimum of `|x|²` and `cap`: `−k log(e^{−|x|²/k} + e^{−cap/k})`.
    SoftCappedSquare {
        cap: f64,
        softness: f64,
    },
    /// `tanh(x_1)` on the first coordinate.
    Tanh,
    Custom(CustomIntegrand),
}

fn centered(x: &[f64], c: &[f64], k: usize) -> f64 {
    x[k] - c.get(k).copied().unwrap_or(0.0)
}

impl Integrand {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Integrand::SmoothNorm { center, smoothing } => {
                let r2: f64 = (0..x.len()).map(|k| centered(x, center, k).powi(2)).sum();
                (r2 + smoothing * smoothing).sqrt() - smoothing
            }
            Integrand::Affine { coeffs, offset } => {
                coeffs.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + offset
            }
            Integrand::HalfSquare { center } => {
                0.5 * (0..x.len())
                    .map(|k| centered(x, center, k).powi(2))
                    .sum::<f64>()
            }
            Integrand::SoftCappedSquare { cap, softness } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                let (lo, hi) = if r2 < *cap { (r2, *cap) } else { (*cap, r2) };
                lo - softness * (-(hi - lo) / softness).exp().ln_1p()
            }
            Integrand::Tanh => x[0].tanh(),
            Integrand::Custom(c) => (c.value)(x),
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Integrand::SmoothNorm { center, smoothing } => {
                let r2: f64 = (0..x.len()).map(|k| centered(x, center, k).powi(2)).sum();
                let norm = (r2 + smoothing * smoothing).sqrt();
                for k in 0..x.len() {
                    out[k] = if norm > 0.0 {
                        centered(x, center, k) / norm
                    } else {
                        0.0
                    };
                }
            }
            Integrand::Affine { coeffs, .. } => {
                for k in 0..x.len() {
                    out[k] = coeffs.get(k).copied().unwrap_or(0.0);
                }
            }
            Integrand::HalfSquare { center } => {
                for k in 0..x.len() {
                    out[k] = centered(x, center, k);
                }
            }
            Integrand::SoftCappedSquare { cap, softness } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                // weight of the |x|² branch in the soft minimum
                let w = 1.0 / (1.0 + ((cap - r2) / softness).exp().recip());
                let w = if w.is_finite() { w } else { 0.0 };
                for k in 0..x.len() {
                    out[k] = 2.0 * x[k] * w;
                }
            }
            Integrand::Tanh => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let t = x[0].tanh();
                out[0] = 1.0 - t * t;
            }
            Integrand::Custom(c) => (c.gradient)(x, out),
        }
    }

    /// `sup |∇ψ|` over a box, by sampling a tensor grid that includes the corners.
    pub fn gradient_sup_on_box(&self, lo: &[f64], hi: &[f64]) -> f64 {
        let d = lo.len();
        let per_axis = ((40_000f64).powf(1.0 / d as f64).floor() as usize).clamp(2, 4001);
        let total = per_axis.pow(d as u32);
        let mut x = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut sup = 0.0f64;
        for idx in 0..total {
            let mut rem = idx;
            for k in 0..d {
                let t = (rem % per_axis) as f64 / (per_axis - 1) as f64;
                rem /= per_axis;
                x[k] = lo[k] + t * (hi[k] - lo[k]);
            }
            self.gradient(&x, &mut g);
            sup = sup.max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        sup
    }
}

/// Outer map `F: ℝ^k → ℝ` of a cylindrical functional.
#[derive(Clone)]
pub enum OuterFunction {
    /// `Σ_j ½ w_j y_j² − offset`.
    HalfSquares { weights: Vec<f64>, offset: f64 },
    Custom {
        name: String,
        value: ScalarFn,
        gradient: GradFn,
    },
}

impl fmt::Debug for OuterFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OuterFunction::HalfSquares { weights, offset } => f
                .debug_struct("HalfSquares")
                .field("weights", weights)
                .field("offset", offset)
                .finish(),
            OuterFunction::Custom { name, .. } => {
                f.debug_struct("Custom").field("name", name).finish()
            }
        }
    }
}

impl OuterFunction {
    pub fn value(&self, y: &[f64]) -> f64 {
        match self {
            OuterFunction::HalfSquares { weights, offset } => {
                weights
                    .iter()
                    .zip(y)
                    .map(|(w, v)| 0.5 * w * v * v)
                    .sum::<f64>()
                    - offset
            }
            OuterFunction::Custom { value, .. } => value(y),
        }
    }

    pub fn gradient(&self, y: &[f64], out: &mut [f64]) {
        match self {
            OuterFunction::HalfSquares { weights, .. } => {
                for (o, (w, v)) in out.iter_mut().zip(weights.iter().zip(y)) {
                    *o = w * v;
                }
            }
            OuterFunction::Custom { gradient, .. } => gradient(y, out),
        }
    }
}

/// A measure functional built from integrals of pointwise integrands.
#[derive(Debug, Clone)]
pub enum MeasureFunctional {
    /// `∫ψ dm − level`.
    Linear { integrand: Integrand, level: f64 },
    /// `F(∫f_1 dm, …, ∫f_k dm)`.
    Cylindrical {
        outer: OuterFunction,
        inner: Vec<Integrand>,
    },
}

impl MeasureFunctional {
    pub fn linear(integrand: Integrand, level: f64) -> Self {
        MeasureFunctional::Linear { integrand, level }
    }

    /// The inner integrands `f_j`.
    pub fn integrands(&self) -> &[Integrand] {
        match self {
            MeasureFunctional::Linear { integrand, .. } => std::slice::from_ref(integrand),
            MeasureFunctional::Cylindrical { inner, .. } => inner,
        }
    }

    /// The moment vector `(∫f_j dm)_j` the functional depends on.
    pub fn integrals(&self, m: MeasureRef<'_>) -> Vec<f64> {
        self.integrands()
            .iter()
            .map(|f| m.integrate(|x| f.value(x)))
            .collect()
    }

    pub fn value_from_integrals(&self, y: &[f64]) -> f64 {
        match self {
            MeasureFunctional::Linear { level, .. } => y[0] - level,
            MeasureFunctional::Cylindrical { outer, .. } => outer.value(y),
        }
    }

    /// `∂F/∂y_j` at the given moments (all ones for the linear kind).
    pub fn outer_gradient(&self, y: &[f64]) -> Vec<f64> {
        match self {
            MeasureFunctional::Linear { .. } => vec![1.0],
            MeasureFunctional::Cylindrical { outer, .. } => {
                let mut g = vec![0.0; y.len()];
                outer.gradient(y, &mut g);
                g
            }
        }
    }

    pub fn value(&self, m: MeasureRef<'_>) -> f64 {
        self.value_from_integrals(&self.integrals(m))
    }

    /// Flat derivative at `x` given precomputed moments and outer gradient.
    pub fn derivative_with(&self, y: &[f64], outer_grad: &[f64], x: &[f64]) -> f64 {
        self.integrands()
            .iter()
            .zip(y.iter().zip(outer_grad))
            .map(|(f, (yj, gj))| gj * (f.value(x) - yj))
            .sum()
    }

    pub fn flat_derivative(&self, m: MeasureRef<'_>, x: &[f64]) -> f64 {
        let y = self.integrals(m);
        let g = self.outer_gradient(&y);
        self.derivative_with(&y, &g, x)
    }

    /// Flat derivative evaluated at every point of `xs` (1D points).
    pub fn flat_derivative_1d(&self, m: MeasureRef<'_>, xs: &[f64]) -> Vec<f64> {
        let y = self.integrals(m);
        let g = self.outer_gradient(&y);
        xs.iter()
            .map(|&x| self.derivative_with(&y, &g, &[x]))
            .collect()
    }
}

/// Constraint `Ψ` together with its `d_1`-Lipschitz constant `C_Ψ`.
#[derive(Debug, Clone)]
pub struct ConstraintFunctional {
    functional: MeasureFunctional,
    lipschitz: f64,
}

impl ConstraintFunctional {
    /// Linear constraint `∫ψ dm − κ`; `C_Ψ = sup |∇ψ|` on the box `[lo, hi]`.
    pub fn linear(integrand: Integrand, kappa: f64, lo: &[f64], hi: &[f64]) -> Self {
        let lipschitz = integrand.gradient_sup_on_box(lo, hi);
        Self {
            functional: MeasureFunctional::linear(integrand, kappa),
            lipschitz,
        }
    }

    /// Any functional with a caller-supplied Lipschitz constant (required for cylindrical `Ψ`).
    pub fn with_lipschitz(functional: MeasureFunctional, lipschitz: f64) -> Self {
        Self {
            functional,
            lipschitz,
        }
    }

    pub fn functional(&self) -> &MeasureFunctional {
        &self.functional
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn value(&self, m: MeasureRef<'_>) -> f64 {
        self.functional.value(m)
    }

    pub fn flat_derivative(&self, m: MeasureRef<'_>, x: &[f64]) -> f64 {
        self.functional.flat_derivative(m, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{EmpiricalMeasure, GridMeasure1D};

    fn smooth_norm() -> Integrand {
        Integrand::SmoothNorm {
            center: vec![],
            smoothing: 0.1,
        }
    }

    #[test]
    fn constraint_at_origin_dirac() {
        let psi = ConstraintFunctional::linear(smooth_norm(), 1.0, &[-3.0, -3.0], &[3.0, 3.0]);
        let m = EmpiricalMeasure::new(2, vec![0.0, 0.0]).unwrap();
        assert!((psi.value((&m).into()) + 1.0).abs() < 1e-15);
        assert!(psi.flat_derivative((&m).into(), &[0.0, 0.0]).abs() < 1e-15);
    }

    #[test]
    fn constraint_on_symmetric_pair() {
        let psi = ConstraintFunctional::linear(smooth_norm(), 1.0, &[-3.0], &[3.0]);
        let m = EmpiricalMeasure::from_scalars(&[-1.0, 1.0]).unwrap();
        let expected = 1.01f64.sqrt() - 0.1 - 1.0;
        assert!((psi.value((&m).into()) - expected).abs() < 1e-15);
        assert!((expected + 0.0950).abs() < 1e-4);
    }

    #[test]
    fn affine_derivative() {
        let f = MeasureFunctional::linear(
            Integrand::Affine {
                coeffs: vec![1.0],
                offset: 0.0,
            },
            0.0,
        );
        let m = EmpiricalMeasure::from_scalars(&[0.1, 0.5]).unwrap();
        assert!((f.flat_derivative((&m).into(), &[1.0]) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn smooth_norm_lipschitz_below_one() {
        let c = smooth_norm().gradient_sup_on_box(&[-4.0], &[4.0]);
        assert!(c < 1.0 && c > 0.999);
    }

    #[test]
    fn soft_cap_matches_branches() {
        let g = Integrand::SoftCappedSquare {
            cap: 4.0,
            softness: 0.05,
        };
        assert!((g.value(&[0.5]) - 0.25).abs() < 1e-12);
        assert!((g.value(&[5.0]) - 4.0).abs() < 1e-12);
        let mut d = [0.0];
        g.gradient(&[0.5], &mut d);
        assert!((d[0] - 1.0).abs() < 1e-12);
        for &x in &[1.9, 2.0, 2.05, -1.97] {
            g.gradient(&[x], &mut d);
            let h = 1e-6;
            let fd = (g.value(&[x + h]) - g.value(&[x - h])) / (2.0 * h);
            assert!((d[0] - fd).abs() < 1e-6, "{x}: {} vs {fd}", d[0]);
        }
    }

    #[test]
    fn grid_normalization() {
        let g = GridMeasure1D::gaussian(-5.0, 5.0, 300, 0.2, 0.7).unwrap();
        let f = MeasureFunctional::Cylindrical {
            outer: OuterFunction::HalfSquares {
                weights: vec![1.0, 2.0],
                offset: 0.3,
            },
            inner: vec![smooth_norm(), Integrand::Tanh],
        };
        let xs = g.centers();
        let vals = f.flat_derivative_1d((&g).into(), &xs);
        let integral: f64 = vals
            .iter()
            .zip(g.density())
            .map(|(v, d)| v * d)
            .sum::<f64>()
            * g.dx();
        assert!(integral.abs() < 1e-12);
    }
}
