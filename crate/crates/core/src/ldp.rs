//! Survival probabilities of the uncontrolled particle system and the
//! logarithmic rate `−(2/N) log v^N` compared against the mean-field value.

use std::io::Write;

use thiserror::Error;

use crate::measure::{ConstraintFunctional, GridMeasure1D, MeasureRef};
use crate::mfsolver::{stability_sweep, SolverError, SolverOptions, SpaceTimeGrid, SweepRow};
use crate::model::{DriftField, ModelSpec};
use crate::particle::{
    em_step_in_place, initial_state, parallel_runs, NoiseSource, SimConfig, SimError,
};
use crate::special::normal_quantile;

/// Two-sided confidence level of the reported intervals.
pub const CONFIDENCE: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LdpError {
    #[error("initial constraint value {0} is not negative")]
    Precondition(f64),
    #[error("need at least one run")]
    NoRuns,
    #[error("rate undefined: no surviving run")]
    RateUndefined,
    #[error(
        "pilot with {pilot} runs saw no survivor; rate not estimable, increase M or decrease N"
    )]
    PilotEmpty { pilot: u64 },
    #[error("pilot sizing asks for {needed} runs, above the cap {cap}")]
    Budget { needed: u64, cap: u64 },
    #[error("model is not the quadratic, cost-free specialization: {0}")]
    Model(String),
    #[error("no delta in the sweep converged")]
    NoReference,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Outcome of `runs` uncontrolled simulations.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalEstimate {
    pub n: usize,
    pub runs: u64,
    pub successes: u64,
    pub v_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl SurvivalEstimate {
    pub fn from_counts(n: usize, successes: u64, runs: u64) -> Self {
        let (ci_lo, ci_hi) = wilson_interval(successes, runs);
        Self {
            n,
            runs,
            successes,
            v_hat: successes as f64 / runs as f64,
            ci_lo,
            ci_hi,
        }
    }

    /// With no survivor the rate cannot be estimated.
    pub fn estimable(&self) -> bool {
        self.successes > 0
    }

    /// Combines independent batches of the same particle count.
    pub fn pool(parts: &[SurvivalEstimate]) -> Option<Self> {
        let first = parts.first()?;
        let successes = parts.iter().map(|p| p.successes).sum();
        let runs = parts.iter().map(|p| p.runs).sum();
        Some(Self::from_counts(first.n, successes, runs))
    }

    pub fn rate(&self) -> Result<f64, LdpError> {
        rate_estimate(self.v_hat, self.n)
    }

    /// `(rate_lo, rate_hi)` from the survival interval; an interval touching 0 gives `+∞`.
    pub fn rate_interval(&self) -> (f64, f64) {
        let tr = |v: f64| {
            if v > 0.0 {
                -2.0 / self.n as f64 * v.ln()
            } else {
                f64::INFINITY
            }
        };
        (tr(self.ci_hi), tr(self.ci_lo))
    }
}

/// Wilson score interval at [`CONFIDENCE`]; with no success the upper end is
/// the exact one-sided bound `1 − (1 − CONFIDENCE)^{1/M}`.
pub fn wilson_interval(successes: u64, runs: u64) -> (f64, f64) {
    if runs == 0 {
        return (0.0, 1.0);
    }
    let m = runs as f64;
    if successes == 0 {
        return (0.0, 1.0 - (1.0 - CONFIDENCE).powf(1.0 / m));
    }
    let z = normal_quantile(0.5 + CONFIDENCE / 2.0);
    let p = successes as f64 / m;
    let z2 = z * z;
    let denom = 1.0 + z2 / m;
    let center = (p + z2 / (2.0 * m)) / denom;
    let half = z / denom * (p * (1.0 - p) / m + z2 / (4.0 * m * m)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// `−(2/N) log v`.
pub fn rate_estimate(v_hat: f64, n: usize) -> Result<f64, LdpError> {
    if !(v_hat > 0.0) {
        return Err(LdpError::RateUndefined);
    }
    Ok(-2.0 / n as f64 * v_hat.ln())
}

/// Whether run `run` keeps `Ψ < 0` at every grid time; stops at the first exit.
pub fn survives(
    cfg: &SimConfig,
    drift: &dyn DriftField,
    psi: &ConstraintFunctional,
    run: u64,
) -> Result<bool, SimError> {
    let mut noise = NoiseSource::for_run(cfg, run);
    let mut state = initial_state(cfg, &mut noise)?;
    let len = cfg.n * cfg.dim;
    let zero = vec![0.0; len];
    let mut xi = vec![0.0; len];
    let mut buf = vec![0.0; len];
    if psi.value(MeasureRef::Empirical(&state)) >= 0.0 {
        return Ok(false);
    }
    for k in 0..cfg.n_steps() {
        noise.fill(&mut xi);
        em_step_in_place(&mut state, &zero, drift, cfg.dt, &xi, &mut buf, k + 1)?;
        if psi.value(MeasureRef::Empirical(&state)) >= 0.0 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Survival estimate from runs `first_run .. first_run + runs`.
pub fn estimate_survival_from(
    cfg: &SimConfig,
    drift: &dyn DriftField,
    psi: &ConstraintFunctional,
    first_run: u64,
    runs: u64,
) -> Result<SurvivalEstimate, LdpError> {
    if runs == 0 {
        return Err(LdpError::NoRuns);
    }
    cfg.validate()?;
    let mut noise = NoiseSource::for_run(cfg, first_run);
    let start = initial_state(cfg, &mut noise)?;
    let psi0 = psi.value(MeasureRef::Empirical(&start));
    if !(psi0 < 0.0) {
        return Err(LdpError::Precondition(psi0));
    }
    let outcomes = parallel_runs(runs, |r| survives(cfg, drift, psi, first_run + r));
    let mut successes = 0;
    for o in outcomes {
        if o? {
            successes += 1;
        }
    }
    Ok(SurvivalEstimate::from_counts(cfg.n, successes, runs))
}

/// Survival estimate over the horizon of `cfg` from `runs` runs.
pub fn estimate_survival(
    cfg: &SimConfig,
    drift: &dyn DriftField,
    psi: &ConstraintFunctional,
    runs: u64,
) -> Result<SurvivalEstimate, LdpError> {
    estimate_survival_from(cfg, drift, psi, 0, runs)
}

/// Pilot sizing: `M = max(min_runs, ⌈target / v_pilot⌉)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotRule {
    pub pilot_runs: u64,
    pub target_successes: f64,
    pub min_runs: u64,
    pub max_runs: u64,
}

impl Default for PilotRule {
    fn default() -> Self {
        Self {
            pilot_runs: 1000,
            target_successes: 100.0,
            min_runs: 1000,
            max_runs: 2_000_000,
        }
    }
}

impl PilotRule {
    pub fn size(&self, pilot: &SurvivalEstimate) -> Result<u64, LdpError> {
        if !pilot.estimable() {
            return Err(LdpError::PilotEmpty { pilot: pilot.runs });
        }
        let needed = ((self.target_successes / pilot.v_hat).ceil() as u64).max(self.min_runs);
        if needed > self.max_runs {
            return Err(LdpError::Budget {
                needed,
                cap: self.max_runs,
            });
        }
        Ok(needed)
    }
}

/// Pilot batch on run indices past the main batch, then the sized main batch.
pub fn sized_survival(
    cfg: &SimConfig,
    drift: &dyn DriftField,
    psi: &ConstraintFunctional,
    rule: &PilotRule,
) -> Result<SurvivalEstimate, LdpError> {
    let pilot = estimate_survival_from(cfg, drift, psi, u64::MAX / 2, rule.pilot_runs)?;
    let m = rule.size(&pilot)?;
    estimate_survival(cfg, drift, psi, m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdpRow {
    pub survival: SurvivalEstimate,
    pub rate: f64,
    pub rate_lo: f64,
    pub rate_hi: f64,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct LdpReport {
    pub rows: Vec<LdpRow>,
    pub u_ref: f64,
    pub delta_ref: f64,
    pub sweep: Vec<SweepRow>,
}

/// Particle side of [`ldp_compare`].
#[derive(Debug, Clone)]
pub struct LdpParticles {
    /// Template; `n` is overwritten per entry of `ns`.
    pub config: SimConfig,
    pub ns: Vec<usize>,
    pub rule: PilotRule,
}

fn check_specialization(model: &ModelSpec) -> Result<(), LdpError> {
    if !model.running_cost.is_zero() || !model.terminal_cost.is_zero() {
        return Err(LdpError::Model("F and G must vanish".into()));
    }
    for q in [-2.0, -0.5, 0.0, 0.7, 3.0] {
        for x in [-1.0, 0.0, 2.0] {
            let l = model.lagrangian.value(&[x], &[q]);
            if (l - 0.5 * q * q).abs() > 1e-9 {
                return Err(LdpError::Model(format!(
                    "L({x}, {q}) = {l}, expected {}",
                    0.5 * q * q
                )));
            }
        }
    }
    Ok(())
}

/// Survival rates for each `N` against `U` at the smallest converged `δ`.
pub fn ldp_compare(
    model: &ModelSpec,
    mu0: &GridMeasure1D,
    grid: &SpaceTimeGrid,
    deltas: &[f64],
    opts: &SolverOptions,
    particles: &LdpParticles,
) -> Result<LdpReport, LdpError> {
    check_specialization(model)?;
    let sweep: Vec<SweepRow> = stability_sweep(model, mu0, deltas, opts, grid)?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    let reference = sweep
        .iter()
        .filter(|r| r.converged)
        .min_by(|a, b| a.delta.total_cmp(&b.delta))
        .ok_or(LdpError::NoReference)?;
    let (u_ref, delta_ref) = (reference.value, reference.delta);
    let mut rows = Vec::with_capacity(particles.ns.len());
    for &n in &particles.ns {
        let mut cfg = particles.config.clone();
        cfg.n = n;
        let survival = sized_survival(
            &cfg,
            model.drift.as_ref(),
            &model.constraint,
            &particles.rule,
        )?;
        let rate = survival.rate()?;
        let (rate_lo, rate_hi) = survival.rate_interval();
        rows.push(LdpRow {
            survival,
            rate,
            rate_lo,
            rate_hi,
            gap: (rate - u_ref).abs(),
        });
    }
    Ok(LdpReport {
        rows,
        u_ref,
        delta_ref,
        sweep,
    })
}

pub const REPORT_HEADER: &str = "N,M,v_hat,ci_lo,ci_hi,rate,rate_lo,rate_hi,U_ref,gap";

pub fn write_report_csv<W: Write>(mut w: W, report: &LdpReport) -> std::io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in &report.rows {
        let s = &r.survival;
        writeln!(
            w,
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            s.n,
            s.runs,
            s.v_hat,
            s.ci_lo,
            s.ci_hi,
            r.rate,
            r.rate_lo,
            r.rate_hi,
            report.u_ref,
            r.gap
        )?;
    }
    Ok(())
}
