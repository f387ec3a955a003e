//! One-dimensional solver for the constrained mean-field control problem.
//!
//! The constraint is handled by penalization: for a flow `μ` the multiplier
//! density is `ν(t) = (2/ε)(Ψ(μ(t)) + δ)⁺` with terminal atom
//! `η = (2/ε)(Ψ(μ(T)) + δ)⁺`. Given `ν`, the backward equation
//!
//! ```text
//! −∂_t u + H(x, Du) − b·Du − Δu = ν δΨ/δm + δF/δm + ∫ Du·δb/δm dμ,   u(T) = δG/δm + η δΨ/δm
//! ```
//!
//! is solved in one-step Duhamel form with the heat kernel, the feedback
//! `α = −∂_p H(x, Du)` drives a conservative finite-volume Fokker–Planck
//! step, and the flow is updated by damped Picard iteration.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::measure::{
    wasserstein_1d, EmpiricalMeasure, GridMeasure1D, Measure1D, MeasureError, MeasureFunctional,
    MeasureRef,
};
use crate::model::ModelSpec;
use crate::particle::{parallel_runs, Policy};

/// Largest diffusive ratio `h/dx²` of a Fokker–Planck sub-step.
pub const MAX_PARABOLIC_RATIO: f64 = 0.4;

/// An Anderson step whose gap exceeds this multiple of the previous one is rejected.
const REJECT_FACTOR: f64 = 1.5;

/// Cells on each side counted as the truncation diagnostic.
pub const BOUNDARY_CELLS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error(
        "CFL number {number:.3} > 1 at step {step}; use at least {suggested_substeps} sub-steps"
    )]
    Cfl {
        step: usize,
        number: f64,
        suggested_substeps: usize,
    },
    #[error("non-finite value function on time slice {slice}")]
    NonFinite { slice: usize },
    #[error("initial constraint value {psi0} is not below -delta (delta = {delta})")]
    Precondition { psi0: f64, delta: f64 },
    #[error("invalid solver options: {0}")]
    Options(String),
    #[error("the grid solver is one-dimensional")]
    Dimension,
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Face flux of the Fokker–Planck update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FluxScheme {
    /// Upwind advection plus centered diffusion.
    Upwind,
    /// Scharfetter–Gummel exponential fitting: upwind in the advection-dominated
    /// limit, centered diffusion at zero velocity, second order in between.
    #[default]
    ExponentialFitting,
}

/// Bernoulli function `z / (e^z − 1)`.
fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 - 0.5 * z
    } else {
        z / z.exp_m1()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_cells: usize,
    pub t0: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub flux: FluxScheme,
    fp_substeps: usize,
}

impl SpaceTimeGrid {
    /// Requires `2 dt ≥ dx²` so that one heat step spans at least one cell.
    pub fn new(
        x_min: f64,
        x_max: f64,
        n_cells: usize,
        t0: f64,
        horizon: f64,
        n_steps: usize,
    ) -> Result<Self, SolverError> {
        if !(x_max > x_min) || n_cells < 2 {
            return Err(SolverError::Grid(format!(
                "need x_min < x_max and >= 2 cells, got [{x_min}, {x_max}] / {n_cells}"
            )));
        }
        if !(horizon > t0) || n_steps == 0 {
            return Err(SolverError::Grid(format!(
                "need t0 < T and >= 1 step, got [{t0}, {horizon}] / {n_steps}"
            )));
        }
        let mut g = Self {
            x_min,
            x_max,
            n_cells,
            t0,
            horizon,
            n_steps,
            flux: FluxScheme::default(),
            fp_substeps: 1,
        };
        if 2.0 * g.dt() < g.dx() * g.dx() * (1.0 - 1e-12) {
            return Err(SolverError::Grid(format!(
                "heat step sigma = {:.3e} is below dx = {:.3e}; increase dt or coarsen x",
                (2.0 * g.dt()).sqrt(),
                g.dx()
            )));
        }
        g.fp_substeps = (g.parabolic_ratio() / MAX_PARABOLIC_RATIO).ceil().max(1.0) as usize;
        Ok(g)
    }

    pub fn with_fp_substeps(mut self, m: usize) -> Self {
        self.fp_substeps = self.fp_substeps.max(m);
        self
    }

    pub fn with_flux(mut self, flux: FluxScheme) -> Self {
        self.flux = flux;
        self
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.n_cells as f64
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt()
    }

    pub fn center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|i| self.center(i)).collect()
    }

    /// `dt / dx²` of a full time step.
    pub fn parabolic_ratio(&self) -> f64 {
        self.dt() / (self.dx() * self.dx())
    }

    pub fn fp_substeps(&self) -> usize {
        self.fp_substeps
    }

    fn matches(&self, m: &GridMeasure1D) -> bool {
        m.n_cells() == self.n_cells
            && (m.x_min() - self.x_min).abs() <= 1e-12 * (1.0 + self.x_min.abs())
            && (m.x_max() - self.x_max).abs() <= 1e-12 * (1.0 + self.x_max.abs())
    }
}

/// Discrete heat semigroup `P_t` on a uniform grid: Gaussian weights of
/// variance `2t`, cut at six standard deviations, each row renormalized to
/// unit mass over the cells inside the domain.
#[derive(Debug, Clone)]
pub struct HeatKernel {
    weights: Vec<f64>,
    row_norm: Vec<f64>,
}

impl HeatKernel {
    pub fn new(n: usize, dx: f64, t: f64) -> Self {
        if t <= 0.0 {
            return Self {
                weights: vec![1.0],
                row_norm: vec![1.0; n],
            };
        }
        let sigma = (2.0 * t).sqrt();
        let half = ((6.0 * sigma / dx).ceil() as usize).min(n.saturating_sub(1));
        let weights: Vec<f64> = (0..=half)
            .map(|m| {
                let z = m as f64 * dx / sigma;
                (-0.5 * z * z).exp()
            })
            .collect();
        let row_norm = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half).min(n - 1);
                (lo..=hi).map(|j| weights[i.abs_diff(j)]).sum::<f64>()
            })
            .collect();
        Self { weights, row_norm }
    }

    pub fn apply(&self, f: &[f64], out: &mut [f64]) {
        let n = f.len();
        let w = &self.weights;
        let half = w.len() - 1;
        for i in 0..n {
            let mut acc = w[0] * f[i];
            let reach = half.min(i).min(n - 1 - i);
            for m in 1..=reach {
                acc += w[m] * (f[i - m] + f[i + m]);
            }
            // one-sided tail where the other side leaves the domain
            for m in reach + 1..=half.min(i) {
                acc += w[m] * f[i - m];
            }
            for m in reach + 1..=half.min(n - 1 - i) {
                acc += w[m] * f[i + m];
            }
            out[i] = acc / self.row_norm[i];
        }
    }
}

/// `P_t f` on a grid of spacing `dx`; `t = 0` is the identity.
pub fn heat_apply(f: &[f64], dx: f64, t: f64) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    HeatKernel::new(f.len(), dx, t).apply(f, &mut out);
    out
}

/// Centered differences, one-sided at the two ends.
pub fn gradient(u: &[f64], dx: f64) -> Vec<f64> {
    let n = u.len();
    let mut g = vec![0.0; n];
    if n < 2 {
        return g;
    }
    g[0] = (u[1] - u[0]) / dx;
    g[n - 1] = (u[n - 1] - u[n - 2]) / dx;
    for i in 1..n - 1 {
        g[i] = (u[i + 1] - u[i - 1]) / (2.0 * dx);
    }
    g
}

#[derive(Debug, Clone)]
pub struct FpFlow {
    /// `μ(t_k)`, `k = 0..=n_steps`.
    pub flow: Vec<GridMeasure1D>,
    /// Total mass removed by clipping negative densities.
    pub clipped_mass: f64,
}

/// Explicit conservative finite-volume Fokker–Planck solve.
///
/// `velocity(k, μ_k, out)` writes the cell-center velocity `α + b` used on
/// `[t_k, t_{k+1}]`; face velocities are averages of the two neighbours, the
/// face flux follows [`SpaceTimeGrid::flux`], and both ends are no-flux.
pub fn fp_forward<V>(
    mu0: &GridMeasure1D,
    grid: &SpaceTimeGrid,
    mut velocity: V,
) -> Result<FpFlow, SolverError>
where
    V: FnMut(usize, &GridMeasure1D, &mut [f64]),
{
    if !grid.matches(mu0) {
        return Err(SolverError::Grid(
            "initial measure is not on the solver grid".into(),
        ));
    }
    let n = grid.n_cells;
    let dx = grid.dx();
    let m = grid.fp_substeps();
    let h = grid.dt() / m as f64;
    let diff = h / (dx * dx);
    let mut flow = Vec::with_capacity(grid.n_steps + 1);
    flow.push(mu0.clone());
    let mut rho = mu0.density().to_vec();
    let mut v = vec![0.0; n];
    let mut face = vec![0.0; n + 1];
    // flux_i = left_i ρ_{i−1} − right_i ρ_i
    let mut left = vec![0.0; n + 1];
    let mut right = vec![0.0; n + 1];
    let mut flux = vec![0.0; n + 1];
    let mut clipped = 0.0;
    for k in 0..grid.n_steps {
        velocity(k, flow.last().expect("flow starts non-empty"), &mut v);
        let mut vmax = 0.0f64;
        for i in 1..n {
            face[i] = 0.5 * (v[i - 1] + v[i]);
            vmax = vmax.max(face[i].abs());
        }
        if !vmax.is_finite() {
            return Err(SolverError::Grid(format!(
                "non-finite velocity at step {k}"
            )));
        }
        let number = vmax * h / dx + 2.0 * diff;
        if number > 1.0 {
            let per_sub = vmax * grid.dt() / dx + 2.0 * grid.dt() / (dx * dx);
            return Err(SolverError::Cfl {
                step: k,
                number,
                suggested_substeps: per_sub.ceil() as usize + 1,
            });
        }
        for i in 1..n {
            let v = face[i];
            (left[i], right[i]) = match grid.flux {
                FluxScheme::Upwind => (v.max(0.0) + 1.0 / dx, (-v).max(0.0) + 1.0 / dx),
                FluxScheme::ExponentialFitting => (bernoulli(-v * dx) / dx, bernoulli(v * dx) / dx),
            };
        }
        for _ in 0..m {
            for i in 1..n {
                flux[i] = left[i] * rho[i - 1] - right[i] * rho[i];
            }
            for i in 0..n {
                rho[i] -= h / dx * (flux[i + 1] - flux[i]);
                if rho[i] < 0.0 {
                    clipped -= rho[i] * dx;
                    rho[i] = 0.0;
                }
            }
        }
        flow.push(GridMeasure1D::from_raw(
            grid.x_min,
            grid.x_max,
            rho.clone(),
        )?);
    }
    Ok(FpFlow {
        flow,
        clipped_mass: clipped,
    })
}

/// `u` on every time slice together with `Du` and the multipliers that produced it.
#[derive(Debug, Clone)]
pub struct ValueField {
    pub u: Vec<Vec<f64>>,
    pub du: Vec<Vec<f64>>,
    /// `ν(t_k)`, `k = 0..n_steps` (left endpoints).
    pub nu: Vec<f64>,
    pub eta: f64,
}

/// Inputs of one backward sweep.
pub struct HjbData<'a> {
    pub terminal: &'a [f64],
    /// Right-hand side on `[t_k, t_{k+1}]`, `k = 0..n_steps`.
    pub source: &'a [Vec<f64>],
    /// `b(x, μ(t_k))` at cell centers; empty slice means zero drift.
    pub drift: &'a [Vec<f64>],
    /// Extra source depending on `Du_{k+1}` (the drift coupling term), if any.
    pub coupling: Option<&'a (dyn Fn(usize, &[f64]) -> Vec<f64> + Sync)>,
}

/// Backward sweep `u_k = P_dt u_{k+1} + dt [src_k − H(x, Du_{k+1}) + b_k·Du_{k+1}]`.
pub fn hjb_backward(
    data: &HjbData<'_>,
    hamiltonian: &dyn crate::model::Hamiltonian,
    grid: &SpaceTimeGrid,
) -> Result<ValueField, SolverError> {
    let n = grid.n_cells;
    let (dx, dt) = (grid.dx(), grid.dt());
    if data.terminal.len() != n || data.source.len() != grid.n_steps {
        return Err(SolverError::Grid(
            "terminal/source shape does not match the grid".into(),
        ));
    }
    let xs = grid.centers();
    let kernel = HeatKernel::new(n, dx, dt);
    let mut u = vec![Vec::new(); grid.n_steps + 1];
    let mut du = vec![Vec::new(); grid.n_steps + 1];
    u[grid.n_steps] = data.terminal.to_vec();
    du[grid.n_steps] = gradient(data.terminal, dx);
    if data.terminal.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFinite {
            slice: grid.n_steps,
        });
    }
    let mut heat = vec![0.0; n];
    for k in (0..grid.n_steps).rev() {
        kernel.apply(&u[k + 1], &mut heat);
        let p = &du[k + 1];
        let extra = data.coupling.map(|c| c(k, p));
        let mut next = vec![0.0; n];
        for i in 0..n {
            let mut rhs = data.source[k][i] - hamiltonian.value(&[xs[i]], &[p[i]]);
            if let Some(b) = data.drift.get(k) {
                rhs += b[i] * p[i];
            }
            if let Some(e) = &extra {
                rhs += e[i];
            }
            next[i] = heat[i] + dt * rhs;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite { slice: k });
        }
        du[k] = gradient(&next, dx);
        u[k] = next;
    }
    Ok(ValueField {
        u,
        du,
        nu: vec![0.0; grid.n_steps],
        eta: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Final penalty parameter `ε`.
    pub eps: f64,
    /// Start of the `ε`-continuation; `None` solves at `eps` directly.
    pub eps_start: Option<f64>,
    /// Factor between continuation stages.
    pub eps_factor: f64,
    /// Stop when `sup_t d_1(new flow, μ^k) < tol_fp`.
    pub tol_fp: f64,
    /// Iteration cap per continuation stage.
    pub k_max: usize,
    /// Initial damping `ω ∈ (0, 1]`.
    pub omega: f64,
    /// Anderson mixing depth; 0 is plain damped Picard.
    pub anderson_depth: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            eps_start: Some(0.1),
            eps_factor: 0.25,
            tol_fp: 1e-6,
            k_max: 2000,
            omega: 0.5,
            anderson_depth: 5,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<(), SolverError> {
        if !(self.eps > 0.0)
            || !(self.tol_fp > 0.0)
            || self.k_max == 0
            || !(self.omega > 0.0 && self.omega <= 1.0)
        {
            return Err(SolverError::Options(format!("{self:?}")));
        }
        if !(self.eps_factor > 0.0 && self.eps_factor < 1.0) {
            return Err(SolverError::Options("eps_factor must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn schedule(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(mut e) = self.eps_start {
            while e > self.eps * (1.0 + 1e-12) {
                out.push(e);
                e *= self.eps_factor;
            }
        }
        out.push(self.eps);
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Residuals {
    /// Undamped `sup_t d_1` between the flow generated by the returned control and the iterate that defined it.
    pub fixed_point_gap: f64,
    /// `|Σ_k dt (Ψ(μ(t_k)) + δ) ν(t_k)|`.
    pub exclusion_gap: f64,
    /// `|(Ψ(μ(T)) + δ) η|`.
    pub terminal_exclusion: f64,
    /// `max_t Ψ(μ(t))`.
    pub constraint_max: f64,
    pub iterations: usize,
    pub converged: bool,
    pub clipped_mass: f64,
    /// Largest mass within [`BOUNDARY_CELLS`] of either end over all slices.
    pub boundary_mass: f64,
    /// Final damping factor.
    pub omega: f64,
}

#[derive(Debug, Clone)]
pub struct MfSolution {
    pub grid: SpaceTimeGrid,
    pub delta: f64,
    pub eps: f64,
    pub flow: Vec<GridMeasure1D>,
    pub value_field: ValueField,
    /// `α(t_k, x_i) = −∂_p H(x_i, Du(t_k, x_i))`, `k = 0..=n_steps`.
    pub control: Vec<Vec<f64>>,
    /// `U = ∫u(t0) dμ0 + Σ_k F(μ(t_k)) dt + G(μ(T))`.
    pub value: f64,
    /// Cost of the returned control along its own flow, left-endpoint rule.
    pub direct_cost: f64,
    pub residuals: Residuals,
}

impl MfSolution {
    /// `U` recomputed from `u`, the flow and the costs.
    pub fn value_from_parts(&self, model: &ModelSpec) -> f64 {
        let dt = self.grid.dt();
        let u0 = &self.value_field.u[0];
        let mu0 = &self.flow[0];
        let head: f64 = u0
            .iter()
            .zip(mu0.density())
            .map(|(u, d)| u * d)
            .sum::<f64>()
            * mu0.dx();
        let running: f64 = self.flow[..self.grid.n_steps]
            .iter()
            .map(|m| model.running_cost.value(MeasureRef::Grid(m)) * dt)
            .sum();
        head + running
            + model
                .terminal_cost
                .value(MeasureRef::Grid(self.flow.last().expect("non-empty flow")))
    }

    pub fn feedback(&self) -> GridFeedback {
        GridFeedback {
            x_min: self.grid.x_min,
            dx: self.grid.dx(),
            t0: self.grid.t0,
            dt: self.grid.dt(),
            alpha: self.control.clone(),
        }
    }

    /// `(sup |α|, max_{k,i} |α_{k,i+1} − α_{k,i}| / dx)`.
    pub fn control_regularity(&self) -> (f64, f64) {
        let dx = self.grid.dx();
        let mut sup = 0.0f64;
        let mut lip = 0.0f64;
        for row in &self.control {
            for w in row.windows(2) {
                lip = lip.max((w[1] - w[0]).abs() / dx);
            }
            for a in row {
                sup = sup.max(a.abs());
            }
        }
        (sup, lip)
    }
}

/// Type-II Anderson mixing over the stacked densities of a flow.
struct Anderson {
    depth: usize,
    dx: Vec<Vec<f64>>,
    df: Vec<Vec<f64>>,
    last: Option<(Vec<f64>, Vec<f64>)>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Self {
            depth,
            dx: Vec::new(),
            df: Vec::new(),
            last: None,
        }
    }

    fn reset(&mut self) {
        self.dx.clear();
        self.df.clear();
        self.last = None;
    }

    /// Next iterate from the current point `x` and its image `g`.
    fn next(&mut self, x: Vec<f64>, g: &[f64], omega: f64) -> Vec<f64> {
        let f: Vec<f64> = g.iter().zip(&x).map(|(a, b)| a - b).collect();
        if let Some((px, pf)) = self.last.take() {
            self.dx
                .push(x.iter().zip(&px).map(|(a, b)| a - b).collect());
            self.df
                .push(f.iter().zip(&pf).map(|(a, b)| a - b).collect());
            if self.dx.len() > self.depth {
                self.dx.remove(0);
                self.df.remove(0);
            }
        }
        let mut out: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + omega * b).collect();
        let m = self.df.len();
        if m > 0 {
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let gram = DMatrix::from_fn(m, m, |i, j| dot(&self.df[i], &self.df[j]));
            let rhs = DVector::from_fn(m, |i, _| dot(&self.df[i], &f));
            let ridge = 1e-10 * gram.trace().max(f64::MIN_POSITIVE);
            let gram = gram + DMatrix::identity(m, m) * ridge;
            if let Some(gamma) = gram.lu().solve(&rhs) {
                for (j, gj) in gamma.iter().enumerate() {
                    for (o, (a, b)) in out.iter_mut().zip(self.dx[j].iter().zip(&self.df[j])) {
                        *o -= gj * (a + omega * b);
                    }
                }
            }
        }
        self.last = Some((x, f));
        out
    }
}

fn stack(flow: &[GridMeasure1D]) -> Vec<f64> {
    flow.iter()
        .flat_map(|m| m.density().iter().copied())
        .collect()
}

/// Splits stacked densities back into a flow, clipping negatives and restoring unit mass.
fn unstack(x: &[f64], like: &[GridMeasure1D]) -> Result<Vec<GridMeasure1D>, SolverError> {
    let n = like[0].n_cells();
    let dx = like[0].dx();
    like.iter()
        .zip(x.chunks(n))
        .map(|(m, chunk)| {
            let mut d: Vec<f64> = chunk.iter().map(|v| v.max(0.0)).collect();
            let mass = d.iter().sum::<f64>() * dx;
            d.iter_mut().for_each(|v| *v /= mass);
            Ok(GridMeasure1D::from_raw(m.x_min(), m.x_max(), d)?)
        })
        .collect()
}

struct Iterate {
    value_field: ValueField,
    control: Vec<Vec<f64>>,
    new_flow: FpFlow,
    gap: f64,
}

/// Integrands of a functional sampled once at the cell centers.
struct CenterTable<'a> {
    f: &'a MeasureFunctional,
    vals: Vec<Vec<f64>>,
}

impl<'a> CenterTable<'a> {
    fn new(f: &'a MeasureFunctional, xs: &[f64]) -> Self {
        let vals = f
            .integrands()
            .iter()
            .map(|g| xs.iter().map(|&x| g.value(&[x])).collect())
            .collect();
        Self { f, vals }
    }

    fn integrals(&self, m: &GridMeasure1D) -> Vec<f64> {
        let dx = m.dx();
        self.vals
            .iter()
            .map(|v| v.iter().zip(m.density()).map(|(a, b)| a * b).sum::<f64>() * dx)
            .collect()
    }

    fn value(&self, m: &GridMeasure1D) -> f64 {
        self.f.value_from_integrals(&self.integrals(m))
    }

    /// Flat derivative at every center.
    fn derivative(&self, m: &GridMeasure1D) -> Vec<f64> {
        let y = self.integrals(m);
        let g = self.f.outer_gradient(&y);
        let n = self.vals[0].len();
        (0..n)
            .map(|i| {
                self.vals
                    .iter()
                    .zip(y.iter().zip(&g))
                    .map(|(v, (yj, gj))| gj * (v[i] - yj))
                    .sum()
            })
            .collect()
    }
}

struct Problem<'a> {
    model: &'a ModelSpec,
    mu0: &'a GridMeasure1D,
    delta: f64,
    xs: Vec<f64>,
    psi: CenterTable<'a>,
    running: Option<CenterTable<'a>>,
    terminal: Option<CenterTable<'a>>,
}

impl<'a> Problem<'a> {
    fn new(model: &'a ModelSpec, mu0: &'a GridMeasure1D, delta: f64, xs: Vec<f64>) -> Self {
        let psi = CenterTable::new(model.constraint.functional(), &xs);
        let running = model
            .running_cost
            .0
            .as_ref()
            .map(|f| CenterTable::new(f, &xs));
        let terminal = model
            .terminal_cost
            .0
            .as_ref()
            .map(|f| CenterTable::new(f, &xs));
        Self {
            model,
            mu0,
            delta,
            xs,
            psi,
            running,
            terminal,
        }
    }

    fn cost_derivative(table: &Option<CenterTable<'_>>, m: &GridMeasure1D, n: usize) -> Vec<f64> {
        table
            .as_ref()
            .map_or_else(|| vec![0.0; n], |t| t.derivative(m))
    }

    fn drift_at(&self, m: &GridMeasure1D) -> Vec<f64> {
        let mut out = [0.0];
        self.xs
            .iter()
            .map(|&x| {
                self.model.drift.eval(&[x], MeasureRef::Grid(m), &mut out);
                out[0]
            })
            .collect()
    }

    fn controls_from(&self, du: &[f64]) -> Vec<f64> {
        let mut out = [0.0];
        self.xs
            .iter()
            .zip(du)
            .map(|(&x, &p)| {
                self.model.hamiltonian.grad_p(&[x], &[p], &mut out);
                -out[0]
            })
            .collect()
    }

    fn step(
        &self,
        flow: &[GridMeasure1D],
        eps: f64,
        grid: &SpaceTimeGrid,
    ) -> Result<Iterate, SolverError> {
        let model = self.model;
        let n_steps = grid.n_steps;
        let n = self.xs.len();
        let psi_vals: Vec<f64> = flow.iter().map(|m| self.psi.value(m)).collect();
        let nu: Vec<f64> = psi_vals[..n_steps]
            .iter()
            .map(|p| 2.0 / eps * (p + self.delta).max(0.0))
            .collect();
        let eta = 2.0 / eps * (psi_vals[n_steps] + self.delta).max(0.0);

        let source: Vec<Vec<f64>> = (0..n_steps)
            .map(|k| {
                let f = Self::cost_derivative(&self.running, &flow[k], n);
                if nu[k] > 0.0 {
                    let dpsi = self.psi.derivative(&flow[k]);
                    f.iter().zip(&dpsi).map(|(a, b)| a + nu[k] * b).collect()
                } else {
                    f
                }
            })
            .collect();
        let last = &flow[n_steps];
        let mut terminal = Self::cost_derivative(&self.terminal, last, n);
        if eta > 0.0 {
            let dpsi = self.psi.derivative(last);
            terminal
                .iter_mut()
                .zip(&dpsi)
                .for_each(|(t, d)| *t += eta * d);
        }
        let has_drift = model.drift.sup_norm() > 0.0;
        let drift: Vec<Vec<f64>> = if has_drift {
            flow[..n_steps].iter().map(|m| self.drift_at(m)).collect()
        } else {
            Vec::new()
        };
        let xs = &self.xs;
        let coupling = |k: usize, du: &[f64]| -> Vec<f64> {
            // ∫ Du(y) δb/δm(y, μ_k, x) dμ_k(y) at every center x
            let m = &flow[k];
            let dx = m.dx();
            let mut out = [0.0];
            xs.iter()
                .map(|&x| {
                    let mut acc = 0.0;
                    for (j, (&y, &rho)) in xs.iter().zip(m.density()).enumerate() {
                        if rho == 0.0 {
                            continue;
                        }
                        model
                            .drift
                            .flat_derivative(&[y], MeasureRef::Grid(m), &[x], &mut out);
                        acc += du[j] * out[0] * rho;
                    }
                    acc * dx
                })
                .collect()
        };
        let coupled = model.drift.depends_on_measure();
        let data = HjbData {
            terminal: &terminal,
            source: &source,
            drift: &drift,
            coupling: if coupled { Some(&coupling) } else { None },
        };
        let mut vf = hjb_backward(&data, model.hamiltonian.as_ref(), grid)?;
        vf.nu = nu;
        vf.eta = eta;
        let control: Vec<Vec<f64>> = vf.du.iter().map(|du| self.controls_from(du)).collect();
        let new_flow = fp_forward(self.mu0, grid, |k, current, out| {
            let b = if has_drift {
                self.drift_at(current)
            } else {
                vec![0.0; out.len()]
            };
            for i in 0..out.len() {
                out[i] = control[k][i] + b[i];
            }
        })?;
        let mut gap = 0.0f64;
        for (a, b) in new_flow.flow.iter().zip(flow) {
            gap = gap.max(wasserstein_1d(Measure1D::Grid(a), Measure1D::Grid(b), 1)?);
        }
        Ok(Iterate {
            value_field: vf,
            control,
            new_flow,
            gap,
        })
    }
}

fn uncontrolled_flow(
    p: &Problem<'_>,
    grid: &SpaceTimeGrid,
) -> Result<Vec<GridMeasure1D>, SolverError> {
    let has_drift = p.model.drift.sup_norm() > 0.0;
    Ok(fp_forward(p.mu0, grid, |_, current, out| {
        if has_drift {
            out.copy_from_slice(&p.drift_at(current));
        } else {
            out.iter_mut().for_each(|o| *o = 0.0);
        }
    })?
    .flow)
}

/// Damped Picard iteration on the penalized optimality system, with optional
/// continuation in `ε`.
pub fn solve_mfoc(
    model: &ModelSpec,
    mu0: &GridMeasure1D,
    delta: f64,
    opts: &SolverOptions,
    grid: &SpaceTimeGrid,
) -> Result<MfSolution, SolverError> {
    opts.validate()?;
    if !(delta >= 0.0) {
        return Err(SolverError::Options(format!(
            "delta must be >= 0, got {delta}"
        )));
    }
    if !grid.matches(mu0) {
        return Err(SolverError::Grid(
            "initial measure is not on the solver grid".into(),
        ));
    }
    let psi0 = model.constraint.value(MeasureRef::Grid(mu0));
    if !(psi0 < -delta) {
        return Err(SolverError::Precondition { psi0, delta });
    }
    let mut grid = grid.clone();
    let p = Problem::new(model, mu0, delta, grid.centers());
    let mut flow = uncontrolled_flow(&p, &grid)?;
    let mut omega = opts.omega;
    let mut total_iters = 0;
    let mut result: Option<(Iterate, f64, bool)> = None;

    for eps in opts.schedule() {
        let mut best: Option<Iterate> = None;
        let mut history: Vec<f64> = Vec::new();
        let mut converged = false;
        let mut iters = 0;
        let mut mixer = Anderson::new(opts.anderson_depth);
        // last accepted flow, its image and its gap
        let mut accepted: Option<(Vec<GridMeasure1D>, Vec<GridMeasure1D>, f64)> = None;
        while iters < opts.k_max {
            let step = p.step(&flow, eps, &grid);
            if let Err(SolverError::Cfl {
                suggested_substeps, ..
            }) = step
            {
                grid = grid.with_fp_substeps(suggested_substeps);
                continue;
            }
            iters += 1;
            total_iters += 1;
            let rejected = match (&step, &accepted) {
                (Err(SolverError::NonFinite { .. }), Some(_)) => true,
                (Ok(it), Some((_, _, prev))) => {
                    opts.anderson_depth > 0 && it.gap > REJECT_FACTOR * prev
                }
                _ => false,
            };
            if rejected {
                // plain damped step from the last accepted iterate
                let (x, g, _) = accepted
                    .as_ref()
                    .expect("rejection needs an accepted iterate");
                mixer.reset();
                history.clear();
                omega *= 0.5;
                flow = x.iter().zip(g).map(|(a, b)| a.mix(b, omega)).collect();
                continue;
            }
            let it = step?;
            let gap = it.gap;
            let n = history.len();
            if n >= 2 && gap > history[n - 1] && history[n - 1] > history[n - 2] {
                omega *= 0.5;
                history.clear();
                mixer.reset();
            }
            history.push(gap);
            let next = if opts.anderson_depth == 0 {
                flow.iter()
                    .zip(&it.new_flow.flow)
                    .map(|(m, new)| m.mix(new, omega))
                    .collect()
            } else {
                unstack(
                    &mixer.next(stack(&flow), &stack(&it.new_flow.flow), omega),
                    &flow,
                )?
            };
            accepted = Some((
                std::mem::replace(&mut flow, next),
                it.new_flow.flow.clone(),
                gap,
            ));
            if gap < opts.tol_fp {
                converged = true;
                best = Some(it);
                break;
            }
            if best.as_ref().is_none_or(|b| gap < b.gap) {
                best = Some(it);
            }
        }
        let best = best.expect("at least one iteration");
        if converged {
            // continue from the converged flow itself
            flow = best.new_flow.flow.clone();
        }
        result = Some((best, eps, converged));
    }
    let (best, eps, converged) = result.expect("non-empty schedule");
    Ok(assemble(&p, best, eps, converged, total_iters, omega, grid))
}

fn assemble(
    p: &Problem<'_>,
    it: Iterate,
    eps: f64,
    converged: bool,
    iterations: usize,
    omega: f64,
    grid: SpaceTimeGrid,
) -> MfSolution {
    let model = p.model;
    let dt = grid.dt();
    let n_steps = grid.n_steps;
    let flow = it.new_flow.flow;
    let psi_vals: Vec<f64> = flow
        .iter()
        .map(|m| model.constraint.value(MeasureRef::Grid(m)))
        .collect();
    let exclusion_gap = psi_vals[..n_steps]
        .iter()
        .zip(&it.value_field.nu)
        .map(|(psi, nu)| (psi + p.delta) * nu * dt)
        .sum::<f64>()
        .abs();
    let terminal_exclusion = ((psi_vals[n_steps] + p.delta) * it.value_field.eta).abs();
    let constraint_max = psi_vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let boundary_mass = flow
        .iter()
        .map(|m| m.boundary_mass(BOUNDARY_CELLS))
        .fold(0.0, f64::max);

    let mut direct = 0.0;
    let mut lag = [0.0];
    for k in 0..n_steps {
        let m = &flow[k];
        let kinetic: f64 =
            p.xs.iter()
                .zip(&it.control[k])
                .zip(m.density())
                .map(|((&x, &a), &rho)| {
                    lag[0] = model.lagrangian.value(&[x], &[a]);
                    lag[0] * rho
                })
                .sum::<f64>()
                * m.dx();
        direct += (kinetic + model.running_cost.value(MeasureRef::Grid(m))) * dt;
    }
    direct += model.terminal_cost.value(MeasureRef::Grid(&flow[n_steps]));

    let residuals = Residuals {
        fixed_point_gap: it.gap,
        exclusion_gap,
        terminal_exclusion,
        constraint_max,
        iterations,
        converged,
        clipped_mass: it.new_flow.clipped_mass,
        boundary_mass,
        omega,
    };
    let mut sol = MfSolution {
        grid,
        delta: p.delta,
        eps,
        flow,
        value_field: it.value_field,
        control: it.control,
        value: 0.0,
        direct_cost: direct,
        residuals,
    };
    sol.value = sol.value_from_parts(model);
    sol
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub delta: f64,
    pub value: f64,
    pub direct_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub fixed_point_gap: f64,
    pub exclusion_gap: f64,
    pub constraint_max: f64,
}

impl SweepRow {
    pub fn from_solution(sol: &MfSolution) -> Self {
        let r = &sol.residuals;
        Self {
            delta: sol.delta,
            value: sol.value,
            direct_cost: sol.direct_cost,
            iterations: r.iterations,
            converged: r.converged,
            fixed_point_gap: r.fixed_point_gap,
            exclusion_gap: r.exclusion_gap,
            constraint_max: r.constraint_max,
        }
    }
}

/// One solve per `δ`, in parallel; rows sorted by decreasing `δ`.
pub fn stability_sweep(
    model: &ModelSpec,
    mu0: &GridMeasure1D,
    deltas: &[f64],
    opts: &SolverOptions,
    grid: &SpaceTimeGrid,
) -> Result<Vec<(SweepRow, MfSolution)>, SolverError> {
    let mut ds = deltas.to_vec();
    ds.sort_by(|a, b| b.total_cmp(a));
    let out = parallel_runs(ds.len() as u64, |i| {
        solve_mfoc(model, mu0, ds[i as usize], opts, grid)
    });
    out.into_iter()
        .map(|r| r.map(|sol| (SweepRow::from_solution(&sol), sol)))
        .collect()
}

/// Feedback `α(t, x)` tabulated on the solver grid: piecewise constant in
/// time, linear in `x` between cell centers, constant beyond the end centers.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFeedback {
    pub x_min: f64,
    pub dx: f64,
    pub t0: f64,
    pub dt: f64,
    pub alpha: Vec<Vec<f64>>,
}

impl GridFeedback {
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let k = (((t - self.t0) / self.dt) + 1e-9).floor().max(0.0) as usize;
        let row = &self.alpha[k.min(self.alpha.len() - 1)];
        let s = (x - self.x_min) / self.dx - 0.5;
        if s <= 0.0 {
            return row[0];
        }
        let i = s.floor() as usize;
        if i + 1 >= row.len() {
            return row[row.len() - 1];
        }
        let w = s - i as f64;
        (1.0 - w) * row[i] + w * row[i + 1]
    }

    /// `t,x,alpha` rows, one per slice and cell.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,x,alpha")?;
        for (k, row) in self.alpha.iter().enumerate() {
            let t = self.t0 + k as f64 * self.dt;
            for (i, a) in row.iter().enumerate() {
                writeln!(w, "{},{},{}", t, self.x_min + (i as f64 + 0.5) * self.dx, a)?;
            }
        }
        Ok(())
    }

    /// Reads the output of [`GridFeedback::write_csv`]; `#` lines are skipped.
    pub fn read_csv(text: &str) -> Result<Self, SolverError> {
        let bad = |msg: &str| SolverError::Grid(format!("feedback table: {msg}"));
        let mut rows: Vec<(f64, f64, f64)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("t,") {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad(&format!("unparsable row {line:?}")))?;
            if v.len() != 3 {
                return Err(bad("expected 3 columns"));
            }
            rows.push((v[0], v[1], v[2]));
        }
        if rows.is_empty() {
            return Err(bad("no rows"));
        }
        let t0 = rows[0].0;
        let n_cells = rows.iter().take_while(|r| r.0 == t0).count();
        if n_cells < 2 || rows.len() % n_cells != 0 {
            return Err(bad("ragged table"));
        }
        let dx = rows[1].1 - rows[0].1;
        let x_min = rows[0].1 - 0.5 * dx;
        let n_slices = rows.len() / n_cells;
        let dt = if n_slices > 1 {
            rows[n_cells].0 - t0
        } else {
            1.0
        };
        let alpha = rows
            .chunks(n_cells)
            .map(|c| c.iter().map(|r| r.2).collect())
            .collect();
        Ok(Self {
            x_min,
            dx,
            t0,
            dt,
            alpha,
        })
    }
}

impl Policy for GridFeedback {
    fn controls(&self, t: f64, state: &EmpiricalMeasure, out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(state.as_slice()) {
            *o = self.eval(t, *x);
        }
    }
}

/// Per-slice dump: `t,x,u,du,density,alpha,nu`, every `every`-th slice (always the last).
pub fn write_solution_csv<W: Write>(
    mut w: W,
    sol: &MfSolution,
    every: usize,
) -> std::io::Result<()> {
    writeln!(w, "t,x,u,du,density,alpha,nu")?;
    let every = every.max(1);
    let n_steps = sol.grid.n_steps;
    let xs = sol.grid.centers();
    for k in (0..=n_steps).filter(|k| k % every == 0 || *k == n_steps) {
        let t = sol.grid.time(k);
        let nu = if k < n_steps {
            sol.value_field.nu[k]
        } else {
            sol.value_field.eta
        };
        for i in 0..xs.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                t,
                xs[i],
                sol.value_field.u[k][i],
                sol.value_field.du[k][i],
                sol.flow[k].density()[i],
                sol.control[k][i],
                nu
            )?;
        }
    }
    Ok(())
}

pub const SUMMARY_HEADER: &str =
    "delta,U,direct_cost,iterations,converged,fixed_point_gap,exclusion_gap,constraint_max";

pub fn write_summary_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.delta,
            r.value,
            r.direct_cost,
            r.iterations,
            r.converged,
            r.fixed_point_gap,
            r.exclusion_gap,
            r.constraint_max
        )?;
    }
    Ok(())
}
