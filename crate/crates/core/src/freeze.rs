//! Confinement feedback and the switch-at-stopping-time construction.
//!
//! After the stopping time `τ` (first grid time with `Ψ(μ̂) ≥ −δ/2`) every
//! particle follows
//!
//! ```text
//! β_i = 4 (X_i − A_i) / (Σ_j |X_j − A_j|² − r² N) − (2d / r²)(X_i − A_i) − b(X_i, μ̂)
//! ```
//!
//! with `A` the cloud at `τ` and `r = δ / (4 C_Ψ)`. The first term is a
//! barrier keeping `(1/N) Σ |X_i − A_i|²` below `r²`.

use std::io::Write;

use thiserror::Error;

use crate::measure::{EmpiricalMeasure, MeasureRef};
use crate::model::{DriftField, ModelSpec};
use crate::particle::{
    initial_state, mean_and_se, mean_sq_norm, parallel_runs, NoiseSource, PathRecorder, Policy,
    SimConfig, SimError, TrajectoryRecord,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FreezeError {
    #[error("confinement violated: radius ratio {ratio} >= 1")]
    Confinement { ratio: f64 },
    #[error("initial constraint value {psi0} is not below -delta (delta = {delta})")]
    Precondition { psi0: f64, delta: f64 },
    #[error("invalid freeze parameters: {0}")]
    Params(String),
    #[error("anchor already captured")]
    AnchorSet,
    #[error("anchor not captured yet")]
    NoAnchor,
    #[error("anchor has {anchor} coordinates, state has {state}")]
    AnchorShape { anchor: usize, state: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreezeParams {
    delta: f64,
    c_psi: f64,
    r: f64,
    anchor: Option<EmpiricalMeasure>,
}

impl FreezeParams {
    pub fn new(delta: f64, c_psi: f64) -> Result<Self, FreezeError> {
        if !(delta > 0.0 && c_psi > 0.0 && delta.is_finite() && c_psi.is_finite()) {
            return Err(FreezeError::Params(format!(
                "need delta > 0 and C_psi > 0, got {delta}, {c_psi}"
            )));
        }
        Ok(Self {
            delta,
            c_psi,
            r: delta / (4.0 * c_psi),
            anchor: None,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn c_psi(&self) -> f64 {
        self.c_psi
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn anchor(&self) -> Option<&EmpiricalMeasure> {
        self.anchor.as_ref()
    }

    pub fn set_anchor(&mut self, state: &EmpiricalMeasure) -> Result<(), FreezeError> {
        if self.anchor.is_some() {
            return Err(FreezeError::AnchorSet);
        }
        self.anchor = Some(state.clone());
        Ok(())
    }

    /// `(1/N) Σ |x_i − a_i|² / r²`.
    pub fn ratio(&self, state: &EmpiricalMeasure) -> Result<f64, FreezeError> {
        let anchor = self.anchor.as_ref().ok_or(FreezeError::NoAnchor)?;
        check_shape(anchor, state)?;
        Ok(state.mean_squared_displacement(anchor) / (self.r * self.r))
    }
}

fn check_shape(anchor: &EmpiricalMeasure, state: &EmpiricalMeasure) -> Result<(), FreezeError> {
    if anchor.as_slice().len() != state.as_slice().len() || anchor.dim() != state.dim() {
        return Err(FreezeError::AnchorShape {
            anchor: anchor.as_slice().len(),
            state: state.as_slice().len(),
        });
    }
    Ok(())
}

/// The confinement feedback `β` at `state`, row-major `N × d`.
pub fn freeze_feedback(
    state: &EmpiricalMeasure,
    params: &FreezeParams,
    drift: &dyn DriftField,
) -> Result<Vec<f64>, FreezeError> {
    let anchor = params.anchor.as_ref().ok_or(FreezeError::NoAnchor)?;
    check_shape(anchor, state)?;
    let n = state.len();
    let d = state.dim();
    let r2 = params.r * params.r;
    let s: f64 = state
        .as_slice()
        .iter()
        .zip(anchor.as_slice())
        .map(|(x, a)| (x - a) * (x - a))
        .sum();
    let denom = s - r2 * n as f64;
    if denom >= 0.0 {
        return Err(FreezeError::Confinement {
            ratio: s / (r2 * n as f64),
        });
    }
    let mut out = vec![0.0; n * d];
    drift.eval_all(state, &mut out);
    let spring = 2.0 * d as f64 / r2;
    for ((o, x), a) in out.iter_mut().zip(state.as_slice()).zip(anchor.as_slice()) {
        let z = x - a;
        *o = 4.0 * z / denom - spring * z - *o;
    }
    Ok(out)
}

/// Time stepping after the switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeScheme {
    /// Euler–Maruyama with `β` at the pre-step state, plus the radial guard.
    Explicit,
    /// The confining part of `β` taken at the post-step state; the cloud cannot leave the ball.
    SemiImplicit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferOptions {
    pub delta: f64,
    pub c_psi: f64,
    pub scheme: FreezeScheme,
    /// The explicit scheme clamps displacements radially to ratio `1 − guard`.
    pub guard: f64,
}

impl TransferOptions {
    pub fn new(delta: f64, c_psi: f64) -> Self {
        Self {
            delta,
            c_psi,
            scheme: FreezeScheme::SemiImplicit,
            guard: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransferRecord {
    pub trajectory: TrajectoryRecord,
    pub r: f64,
    /// Largest post-switch `(1/N) Σ |X_t − X_τ|² / r²`, measured before any guard clamp.
    pub max_ratio: f64,
    /// Confinement ratio at every grid time, 0 before the switch.
    pub ratio_path: Vec<f64>,
    /// `min_t (−Ψ(μ̂_t))`.
    pub min_margin: f64,
    /// `∫_{τ∧T}^T (1/N) Σ |β|² dt`.
    pub post_tau_energy: f64,
    pub guard_events: usize,
    /// `Ψ` at the switch when the crossing step already reached `Ψ ≥ 0`.
    pub overshoot: Option<f64>,
}

impl TransferRecord {
    pub fn tau_index(&self) -> Option<usize> {
        self.trajectory.tau_index
    }

    /// `T − T∧τ`.
    pub fn residual_time(&self) -> f64 {
        let t_end = *self.trajectory.times.last().expect("non-empty grid");
        self.trajectory.tau_time().map_or(0.0, |t| t_end - t)
    }

    pub fn total_cost(&self) -> f64 {
        self.trajectory.total_cost()
    }
}

/// Solves `s (1 + dt k(s² w2)) = 1` on `(0, min(1, R/|w|))` for
/// `k(ρ) = 4/(R² − ρ) + spring`.
fn implicit_scale(w2: f64, big_r2: f64, spring: f64, dt: f64) -> f64 {
    let f = |s: f64| s * (1.0 + dt * (4.0 / (big_r2 - s * s * w2) + spring)) - 1.0;
    // f(0) = −1 and f increases to +∞ (or to f(1) > 0) at hi
    let mut hi = if w2 > 0.0 {
        (big_r2 / w2).sqrt().min(1.0)
    } else {
        1.0
    };
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Runs control `alpha` until the stopping time, then the confinement feedback.
pub fn transfer_control(
    cfg: &SimConfig,
    model: &ModelSpec,
    alpha: &dyn Policy,
    opts: &TransferOptions,
    run: u64,
) -> Result<TransferRecord, FreezeError> {
    cfg.validate()?;
    let mut params = FreezeParams::new(opts.delta, opts.c_psi)?;
    let mut noise = NoiseSource::for_run(cfg, run);
    let mut state = initial_state(cfg, &mut noise)?;
    let psi_of = |m: &EmpiricalMeasure| model.constraint.value(MeasureRef::Empirical(m));
    let psi0 = psi_of(&state);
    if !(psi0 < -opts.delta) {
        return Err(FreezeError::Precondition {
            psi0,
            delta: opts.delta,
        });
    }
    let threshold = -opts.delta / 2.0;
    let (n, d) = (cfg.n, cfg.dim);
    let len = n * d;
    let r2 = params.r * params.r;
    let big_r2 = r2 * n as f64;
    let spring = 2.0 * d as f64 / r2;
    let sq = (2.0 * cfg.dt).sqrt();

    let mut rec = PathRecorder::new(cfg, run, &state, psi0);
    let mut controls = vec![0.0; len];
    let mut xi = vec![0.0; len];
    let mut buf = vec![0.0; len];
    let mut max_ratio = 0.0f64;
    let mut ratio_path = vec![0.0; cfg.n_steps() + 1];
    let mut post_energy = 0.0;
    let mut guard_events = 0;
    let mut overshoot = None;

    for k in 0..cfg.n_steps() {
        let t = cfg.time(k);
        noise.fill(&mut xi);
        let prev = state.clone();
        let frozen = params.anchor.is_some();
        if !frozen {
            alpha.controls(t, &state, &mut controls);
            rec.charge(
                model.particle_running_cost(&state, &controls),
                mean_sq_norm(&controls, n),
                cfg.dt,
            );
            crate::particle::em_step_in_place(
                &mut state,
                &controls,
                model.drift.as_ref(),
                cfg.dt,
                &xi,
                &mut buf,
                k + 1,
            )?;
        } else {
            let anchor = params.anchor.clone().expect("frozen implies anchor");
            match opts.scheme {
                FreezeScheme::Explicit => {
                    let ratio = params.ratio(&state)?;
                    if ratio > 1.0 - opts.guard {
                        let shrink = ((1.0 - opts.guard) / ratio).sqrt();
                        for (x, a) in state.as_mut_slice().iter_mut().zip(anchor.as_slice()) {
                            *x = a + (*x - a) * shrink;
                        }
                        guard_events += 1;
                    }
                    let beta = freeze_feedback(&state, &params, model.drift.as_ref())?;
                    controls.copy_from_slice(&beta);
                    let energy = mean_sq_norm(&controls, n);
                    rec.charge(
                        model.particle_running_cost(&state, &controls),
                        energy,
                        cfg.dt,
                    );
                    post_energy += energy * cfg.dt;
                    crate::particle::em_step_in_place(
                        &mut state,
                        &controls,
                        model.drift.as_ref(),
                        cfg.dt,
                        &xi,
                        &mut buf,
                        k + 1,
                    )?;
                }
                FreezeScheme::SemiImplicit => {
                    model.drift.eval_all(&state, &mut buf);
                    // W = Z + √(2dt) ξ; Z' = s W with the confining drift taken at Z'
                    let mut w = vec![0.0; len];
                    for j in 0..len {
                        w[j] = state.as_slice()[j] - anchor.as_slice()[j] + sq * xi[j];
                    }
                    let w2: f64 = w.iter().map(|v| v * v).sum();
                    let s = implicit_scale(w2, big_r2, spring, cfg.dt);
                    let s_new = s * s * w2;
                    let kappa = 4.0 / (big_r2 - s_new) + spring;
                    for j in 0..len {
                        let z_new = s * w[j];
                        // effective control: X' = X + (b(X) + β) dt + √(2dt) ξ
                        controls[j] = -kappa * z_new - buf[j];
                    }
                    let energy = mean_sq_norm(&controls, n);
                    rec.charge(
                        model.particle_running_cost(&state, &controls),
                        energy,
                        cfg.dt,
                    );
                    post_energy += energy * cfg.dt;
                    let xs = state.as_mut_slice();
                    for j in 0..len {
                        xs[j] = anchor.as_slice()[j] + s * w[j];
                        if !xs[j].is_finite() {
                            return Err(SimError::NonFinite {
                                step: k + 1,
                                particle: j / d,
                            }
                            .into());
                        }
                    }
                }
            }
            let ratio = params.ratio(&state)?;
            ratio_path[k + 1] = ratio;
            max_ratio = max_ratio.max(ratio);
        }
        let psi = psi_of(&state);
        rec.after_step(k + 1, &prev, &state, psi);
        if !frozen && psi >= threshold {
            rec.record.tau_index = Some(k + 1);
            params.set_anchor(&state)?;
            if psi >= 0.0 {
                overshoot = Some(psi);
            }
        }
    }
    rec.record.terminal_cost = model.terminal_cost.value(MeasureRef::Empirical(&state));
    let trajectory = rec.record;
    let min_margin = -trajectory.max_psi();
    Ok(TransferRecord {
        trajectory,
        r: params.r,
        max_ratio,
        ratio_path,
        min_margin,
        post_tau_energy: post_energy,
        guard_events,
        overshoot,
    })
}

/// Right-hand side of the freeze energy estimate with expectations replaced by
/// averages over `records`:
/// `32d/(r²N) · avg[1{τ<T} e^{T−τ}] + (16d²/r² + 2‖b‖²_∞) · avg[T − T∧τ]`.
///
/// Runs that never switch contribute zero to both averages.
pub fn freeze_cost_bound(
    records: &[&TransferRecord],
    r: f64,
    dim: usize,
    n: usize,
    drift_sup: f64,
) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let m = records.len() as f64;
    let d = dim as f64;
    let exp_term: f64 = records
        .iter()
        .filter(|rec| rec.tau_index().is_some())
        .map(|rec| rec.residual_time().exp())
        .sum::<f64>()
        / m;
    let time_term: f64 = records.iter().map(|rec| rec.residual_time()).sum::<f64>() / m;
    32.0 * d / (r * r * n as f64) * exp_term
        + (16.0 * d * d / (r * r) + 2.0 * drift_sup * drift_sup) * time_term
}

#[derive(Debug, Clone)]
pub struct TransferBatch {
    pub records: Vec<TransferRecord>,
    pub aborted: Vec<(u64, FreezeError)>,
    pub mean_cost: f64,
    pub std_error: f64,
    /// `avg[T − T∧τ]`.
    pub mean_residual_time: f64,
    /// `avg ∫_{τ∧T}^T (1/N) Σ |β|² dt`.
    pub mean_post_tau_energy: f64,
    pub bound: f64,
}

pub fn transfer_batch(
    cfg: &SimConfig,
    model: &ModelSpec,
    alpha: &dyn Policy,
    opts: &TransferOptions,
    runs: u64,
) -> Result<TransferBatch, FreezeError> {
    if runs == 0 {
        return Err(FreezeError::Params("need at least one run".into()));
    }
    let outcomes = parallel_runs(runs, |r| transfer_control(cfg, model, alpha, opts, r));
    let mut records = Vec::new();
    let mut aborted = Vec::new();
    for (r, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(rec) => records.push(rec),
            Err(e @ FreezeError::Precondition { .. }) | Err(e @ FreezeError::Params(_)) => {
                return Err(e)
            }
            Err(e) => aborted.push((r as u64, e)),
        }
    }
    let costs: Vec<f64> = records.iter().map(|r| r.total_cost()).collect();
    let (mean_cost, std_error) = mean_and_se(&costs);
    let m = records.len().max(1) as f64;
    let mean_residual_time = records.iter().map(|r| r.residual_time()).sum::<f64>() / m;
    let mean_post_tau_energy = records.iter().map(|r| r.post_tau_energy).sum::<f64>() / m;
    let refs: Vec<&TransferRecord> = records.iter().collect();
    let r = opts.delta / (4.0 * opts.c_psi);
    let bound = freeze_cost_bound(&refs, r, cfg.dim, cfg.n, model.drift.sup_norm());
    Ok(TransferBatch {
        records,
        aborted,
        mean_cost,
        std_error,
        mean_residual_time,
        mean_post_tau_energy,
        bound,
    })
}

/// Per-run diagnostics: `run,tau,max_ratio,min_margin,post_tau_energy,bound`,
/// where `bound` is the estimate evaluated on that run alone. `tau` is empty
/// for runs that never switch.
pub fn write_freeze_csv<W: Write>(
    mut w: W,
    batch: &TransferBatch,
    dim: usize,
    n: usize,
    drift_sup: f64,
) -> std::io::Result<()> {
    writeln!(w, "run,tau,max_ratio,min_margin,post_tau_energy,bound")?;
    for rec in &batch.records {
        let tau = rec
            .trajectory
            .tau_time()
            .map(|t| format!("{t}"))
            .unwrap_or_default();
        let bound = freeze_cost_bound(&[rec], rec.r, dim, n, drift_sup);
        writeln!(
            w,
            "{},{},{},{},{},{}",
            rec.trajectory.run, tau, rec.max_ratio, rec.min_margin, rec.post_tau_energy, bound
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConfinementDrift, ZeroDrift};

    fn anchored(anchor: &[f64], dim: usize, delta: f64, c: f64) -> FreezeParams {
        let mut p = FreezeParams::new(delta, c).unwrap();
        p.set_anchor(&EmpiricalMeasure::new(dim, anchor.to_vec()).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn radius_from_margin() {
        let p = FreezeParams::new(2.0, 1.0).unwrap();
        assert_eq!(p.r(), 0.5);
        assert!(FreezeParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn anchor_once() {
        let mut p = anchored(&[0.0], 1, 4.0, 1.0);
        let s = EmpiricalMeasure::from_scalars(&[0.0]).unwrap();
        assert_eq!(p.set_anchor(&s), Err(FreezeError::AnchorSet));
    }

    #[test]
    fn at_anchor_only_cancels_drift() {
        let p = anchored(&[0.5, -1.0], 1, 4.0, 1.0);
        let s = EmpiricalMeasure::from_scalars(&[0.5, -1.0]).unwrap();
        let b = ConfinementDrift { strength: 0.7 };
        let beta = freeze_feedback(&s, &p, &b).unwrap();
        assert!((beta[0] + 0.7 * -(0.5f64.tanh())).abs() < 1e-15);
        assert!((beta[1] + 0.7 * (1.0f64.tanh())).abs() < 1e-15);
    }

    #[test]
    fn single_particle_closed_form() {
        // N = 1, d = 1, r = 1: β = 4y/(y² − 1) − 2y
        let p = anchored(&[0.0], 1, 4.0, 1.0);
        for y in [0.3, -0.8, 0.95] {
            let s = EmpiricalMeasure::from_scalars(&[y]).unwrap();
            let beta = freeze_feedback(&s, &p, &ZeroDrift).unwrap();
            assert!((beta[0] - (4.0 * y / (y * y - 1.0) - 2.0 * y)).abs() < 1e-14);
        }
        let out = EmpiricalMeasure::from_scalars(&[1.0]).unwrap();
        assert!(matches!(
            freeze_feedback(&out, &p, &ZeroDrift),
            Err(FreezeError::Confinement { .. })
        ));
    }

    #[test]
    fn odd_in_displacement() {
        let p = anchored(&[0.0, 0.0], 1, 4.0, 1.0);
        let s = EmpiricalMeasure::from_scalars(&[0.4, -0.4]).unwrap();
        let beta = freeze_feedback(&s, &p, &ZeroDrift).unwrap();
        assert_eq!(beta[0], -beta[1]);
    }

    #[test]
    fn implicit_scale_stays_inside() {
        for &(w2, big_r2) in &[(0.0, 1.0), (0.5, 1.0), (4.0, 1.0), (1e6, 0.02)] {
            let s = implicit_scale(w2, big_r2, 800.0, 2.5e-3);
            assert!(s > 0.0 && s <= 1.0);
            assert!(s * s * w2 < big_r2);
            let resid = s * (1.0 + 2.5e-3 * (4.0 / (big_r2 - s * s * w2) + 800.0)) - 1.0;
            assert!(resid.abs() < 1e-9, "{resid}");
        }
    }

    #[test]
    fn bound_single_run_formula() {
        // residual time s: 32 d e^s/(r² N) + (16 d²/r² + 2‖b‖²) s
        let rec = TransferRecord {
            trajectory: TrajectoryRecord {
                run: 0,
                times: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                snapshots: vec![],
                psi_path: vec![-1.0; 5],
                cost_path: vec![0.0; 5],
                tau_index: Some(1),
                running_cost: 0.0,
                terminal_cost: 0.0,
                control_energy: 0.0,
                max_psi_increment: 0.0,
                max_step_displacement: 0.0,
            },
            r: 0.5,
            max_ratio: 0.0,
            ratio_path: vec![],
            min_margin: 1.0,
            post_tau_energy: 0.0,
            guard_events: 0,
            overshoot: None,
        };
        let s: f64 = 0.75;
        let (d, n, r, b) = (2.0, 10usize, 0.5, 0.3);
        let want =
            32.0 * d * s.exp() / (r * r * n as f64) + (16.0 * d * d / (r * r) + 2.0 * b * b) * s;
        assert!((freeze_cost_bound(&[&rec], r, 2, n, b) - want).abs() < 1e-12);
        let mut never = rec.clone();
        never.trajectory.tau_index = None;
        assert_eq!(freeze_cost_bound(&[&never], r, 2, n, b), 0.0);
    }
}
