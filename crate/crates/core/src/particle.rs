//! N-particle system: Euler–Maruyama stepping, seeded noise, stopping-time
//! detection, pathwise cost accounting and parallel Monte Carlo batches.
//!
//! Randomness: run `r` of a batch derives a 256-bit key from
//! `sha256(master_seed, r)`; particle `i` draws from the ChaCha8 stream
//! `stream_ids[i]` (default `i`) under that key. A run therefore produces the
//! same path regardless of scheduling, and relabelling particles together
//! with their stream ids relabels the trajectories.

use std::io::Write;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::measure::{EmpiricalMeasure, MeasureError, MeasureRef};
use crate::model::{DriftField, ModelSpec};

/// Environment variable holding the worker count for parallel batches.
pub const WORKERS_ENV: &str = "MFCLAB_WORKERS";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("non-finite state at step {step} (particle {particle})")]
    NonFinite { step: usize, particle: usize },
    #[error("policy produced {got} control values, expected {expected}")]
    ControlLength { got: usize, expected: usize },
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// How the particles are placed at `t0`.
#[derive(Debug, Clone)]
pub enum InitialState {
    /// Fixed positions, identical in every run.
    Points(EmpiricalMeasure),
    /// Mid-quantiles of `N(mean, std²)`; one-dimensional only.
    GaussianQuantiles { mean: f64, std: f64 },
    /// I.i.d. draws from `N(mean, std² I)`, taken from each particle's own stream.
    Sampled { mean: Vec<f64>, std: f64 },
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n: usize,
    pub dim: usize,
    pub dt: f64,
    pub t0: f64,
    pub horizon: f64,
    pub seed: u64,
    pub initial: InitialState,
    /// Each step's Gaussian increment is the normalized sum of this many
    /// draws, so runs at `dt` and `dt / m` share one Brownian path.
    pub noise_substeps: u32,
    /// Per-particle stream ids; `None` means `0..n`.
    pub stream_ids: Option<Vec<u64>>,
    /// Keep every k-th state (always including the last); `None` keeps none.
    pub snapshot_every: Option<usize>,
}

impl SimConfig {
    pub fn new(
        n: usize,
        dim: usize,
        dt: f64,
        t0: f64,
        horizon: f64,
        seed: u64,
        initial: InitialState,
    ) -> Self {
        Self {
            n,
            dim,
            dt,
            t0,
            horizon,
            seed,
            initial,
            noise_substeps: 1,
            stream_ids: None,
            snapshot_every: None,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 || self.dim == 0 {
            return Err(SimError::Config("need N >= 1 and d >= 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.horizon > self.t0) {
            return Err(SimError::Config(format!(
                "need t0 < T, got [{}, {}]",
                self.t0, self.horizon
            )));
        }
        let steps = (self.horizon - self.t0) / self.dt;
        if (steps - steps.round()).abs() > 1e-6 * steps.max(1.0) || steps.round() < 1.0 {
            return Err(SimError::Config(format!(
                "(T - t0)/dt = {steps} is not a whole number of steps"
            )));
        }
        if self.noise_substeps == 0 {
            return Err(SimError::Config("noise_substeps must be >= 1".into()));
        }
        if let Some(ids) = &self.stream_ids {
            if ids.len() != self.n {
                return Err(SimError::Config(format!(
                    "{} stream ids for {} particles",
                    ids.len(),
                    self.n
                )));
            }
        }
        match &self.initial {
            InitialState::Points(m) => {
                if m.len() != self.n || m.dim() != self.dim {
                    return Err(SimError::Config(format!(
                        "initial points are {}x{}, expected {}x{}",
                        m.len(),
                        m.dim(),
                        self.n,
                        self.dim
                    )));
                }
            }
            InitialState::GaussianQuantiles { std, .. } => {
                if self.dim != 1 || !(*std >= 0.0) {
                    return Err(SimError::Config(
                        "gaussian quantile start needs d = 1 and std >= 0".into(),
                    ));
                }
            }
            InitialState::Sampled { mean, std } => {
                if mean.len() != self.dim || !(*std >= 0.0) {
                    return Err(SimError::Config(
                        "sampled start needs a d-dimensional mean and std >= 0".into(),
                    ));
                }
            }
        }
        if matches!(self.snapshot_every, Some(0)) {
            return Err(SimError::Config("snapshot_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        ((self.horizon - self.t0) / self.dt).round() as usize
    }

    pub fn time(&self, step: usize) -> f64 {
        self.t0 + step as f64 * self.dt
    }

    pub fn stream_id(&self, i: usize) -> u64 {
        self.stream_ids.as_ref().map_or(i as u64, |ids| ids[i])
    }
}

/// 256-bit key of run `run` under `master_seed`.
pub fn run_key(master_seed: u64, run: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(run.to_le_bytes());
    h.finalize().into()
}

/// Per-particle Gaussian streams of one run.
pub struct NoiseSource {
    rngs: Vec<ChaCha8Rng>,
    dim: usize,
    substeps: u32,
}

impl NoiseSource {
    pub fn for_run(cfg: &SimConfig, run: u64) -> Self {
        let key = run_key(cfg.seed, run);
        let rngs = (0..cfg.n)
            .map(|i| {
                let mut rng = ChaCha8Rng::from_seed(key);
                rng.set_stream(cfg.stream_id(i));
                rng
            })
            .collect();
        Self {
            rngs,
            dim: cfg.dim,
            substeps: cfg.noise_substeps,
        }
    }

    pub fn particle_rng(&mut self, i: usize) -> &mut ChaCha8Rng {
        &mut self.rngs[i]
    }

    /// Writes one standard Gaussian `d`-vector per particle into `out`.
    pub fn fill(&mut self, out: &mut [f64]) {
        let d = self.dim;
        let scale = 1.0 / (self.substeps as f64).sqrt();
        for (rng, chunk) in self.rngs.iter_mut().zip(out.chunks_exact_mut(d)) {
            chunk.iter_mut().for_each(|v| *v = 0.0);
            for _ in 0..self.substeps {
                for v in chunk.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += z;
                }
            }
            if self.substeps > 1 {
                chunk.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
}

/// Builds the starting cloud; sampled starts consume the first draws of each stream.
pub fn initial_state(
    cfg: &SimConfig,
    noise: &mut NoiseSource,
) -> Result<EmpiricalMeasure, SimError> {
    let m = match &cfg.initial {
        InitialState::Points(m) => m.clone(),
        InitialState::GaussianQuantiles { mean, std } => {
            EmpiricalMeasure::gaussian_quantiles(cfg.n, *mean, *std)?
        }
        InitialState::Sampled { mean, std } => {
            let mut pts = Vec::with_capacity(cfg.n * cfg.dim);
            for i in 0..cfg.n {
                let rng = noise.particle_rng(i);
                for mk in mean {
                    let z: f64 = StandardNormal.sample(rng);
                    pts.push(mk + std * z);
                }
            }
            EmpiricalMeasure::new(cfg.dim, pts)?
        }
    };
    Ok(m)
}

/// One Euler–Maruyama step `x ← x + (b(x, μ̂) + α)dt + √(2dt) ξ`, with `μ̂`
/// the pre-step measure for every particle.
pub fn em_step(
    state: &EmpiricalMeasure,
    controls: &[f64],
    drift: &dyn DriftField,
    dt: f64,
    noise: &[f64],
) -> Result<EmpiricalMeasure, SimError> {
    let mut next = state.clone();
    let mut buf = vec![0.0; state.as_slice().len()];
    em_step_in_place(&mut next, controls, drift, dt, noise, &mut buf, 0)?;
    Ok(next)
}

/// In-place form of [`em_step`]; `drift_buf` is scratch of length `N·d`.
pub fn em_step_in_place(
    state: &mut EmpiricalMeasure,
    controls: &[f64],
    drift: &dyn DriftField,
    dt: f64,
    noise: &[f64],
    drift_buf: &mut [f64],
    step: usize,
) -> Result<(), SimError> {
    let len = state.as_slice().len();
    if controls.len() != len {
        return Err(SimError::ControlLength {
            got: controls.len(),
            expected: len,
        });
    }
    drift.eval_all(state, drift_buf);
    let sq = (2.0 * dt).sqrt();
    let d = state.dim();
    for (j, x) in state.as_mut_slice().iter_mut().enumerate() {
        *x += (drift_buf[j] + controls[j]) * dt + sq * noise[j];
        if !x.is_finite() {
            return Err(SimError::NonFinite {
                step,
                particle: j / d,
            });
        }
    }
    Ok(())
}

/// Feedback policy `(t, μ̂) ↦ (α_i)`, row-major `N × d`.
pub trait Policy: Send + Sync {
    fn controls(&self, t: f64, state: &EmpiricalMeasure, out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn controls(&self, _t: f64, _state: &EmpiricalMeasure, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// Same vector `v` for every particle at every time.
#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub Vec<f64>);

impl Policy for ConstantPolicy {
    fn controls(&self, _t: f64, _state: &EmpiricalMeasure, out: &mut [f64]) {
        for chunk in out.chunks_exact_mut(self.0.len()) {
            chunk.copy_from_slice(&self.0);
        }
    }
}

/// Distributed feedback `α_i = f(t, x_i)`.
pub struct PointwisePolicy<F>(pub F);

impl<F> Policy for PointwisePolicy<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
{
    fn controls(&self, t: f64, state: &EmpiricalMeasure, out: &mut [f64]) {
        let d = state.dim();
        for (x, o) in state.points().zip(out.chunks_exact_mut(d)) {
            (self.0)(t, x, o);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub state: EmpiricalMeasure,
}

/// Everything recorded along one run.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub run: u64,
    pub times: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    /// `Ψ(μ̂_{t_k})` for `k = 0..=n_steps`.
    pub psi_path: Vec<f64>,
    /// Running cost accumulated up to `t_k`.
    pub cost_path: Vec<f64>,
    /// First step with `Ψ ≥ threshold`; `None` when never reached.
    pub tau_index: Option<usize>,
    pub running_cost: f64,
    pub terminal_cost: f64,
    /// `∫ (1/N) Σ |α_i|² dt`.
    pub control_energy: f64,
    /// `max_k |Ψ(μ̂_{k+1}) − Ψ(μ̂_k)|`.
    pub max_psi_increment: f64,
    /// `max_k (1/N) Σ_i |X^i_{k+1} − X^i_k|`, an upper bound for each single-step `d_1` move.
    pub max_step_displacement: f64,
}

impl TrajectoryRecord {
    pub fn total_cost(&self) -> f64 {
        self.running_cost + self.terminal_cost
    }

    pub fn max_psi(&self) -> f64 {
        self.psi_path
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn tau_time(&self) -> Option<f64> {
        self.tau_index.map(|k| self.times[k])
    }

    /// Number of grid times with `Ψ ≥ 0`.
    pub fn violations(&self) -> usize {
        self.psi_path.iter().filter(|p| **p >= 0.0).count()
    }
}

/// Incremental bookkeeping shared by the plain and the transfer simulators.
pub(crate) struct PathRecorder {
    pub(crate) record: TrajectoryRecord,
    snapshot_every: Option<usize>,
    n_steps: usize,
}

impl PathRecorder {
    pub(crate) fn new(cfg: &SimConfig, run: u64, state: &EmpiricalMeasure, psi0: f64) -> Self {
        let n_steps = cfg.n_steps();
        let mut rec = TrajectoryRecord {
            run,
            times: (0..=n_steps).map(|k| cfg.time(k)).collect(),
            snapshots: Vec::new(),
            psi_path: Vec::with_capacity(n_steps + 1),
            cost_path: Vec::with_capacity(n_steps + 1),
            tau_index: None,
            running_cost: 0.0,
            terminal_cost: 0.0,
            control_energy: 0.0,
            max_psi_increment: 0.0,
            max_step_displacement: 0.0,
        };
        rec.psi_path.push(psi0);
        rec.cost_path.push(0.0);
        if cfg.snapshot_every.is_some() {
            rec.snapshots.push(Snapshot {
                step: 0,
                state: state.clone(),
            });
        }
        Self {
            record: rec,
            snapshot_every: cfg.snapshot_every,
            n_steps,
        }
    }

    /// Adds the left-endpoint cost and energy of step `k`.
    pub(crate) fn charge(&mut self, running: f64, energy: f64, dt: f64) {
        self.record.running_cost += running * dt;
        self.record.control_energy += energy * dt;
    }

    pub(crate) fn after_step(
        &mut self,
        step: usize,
        prev: &EmpiricalMeasure,
        next: &EmpiricalMeasure,
        psi: f64,
    ) {
        let r = &mut self.record;
        let last = *r.psi_path.last().expect("psi path starts non-empty");
        r.max_psi_increment = r.max_psi_increment.max((psi - last).abs());
        r.max_step_displacement = r.max_step_displacement.max(prev.mean_displacement(next));
        r.psi_path.push(psi);
        r.cost_path.push(r.running_cost);
        if let Some(every) = self.snapshot_every {
            if step % every == 0 || step == self.n_steps {
                r.snapshots.push(Snapshot {
                    step,
                    state: next.clone(),
                });
            }
        }
    }
}

pub(crate) fn mean_sq_norm(v: &[f64], n: usize) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>() / n as f64
}

/// Simulates run 0 of `cfg`.
pub fn simulate(
    cfg: &SimConfig,
    model: &ModelSpec,
    policy: &dyn Policy,
    stop_threshold: Option<f64>,
) -> Result<TrajectoryRecord, SimError> {
    simulate_run(cfg, model, policy, stop_threshold, 0)
}

/// Simulates run `run` of `cfg` over the whole horizon, recording the first
/// grid time at which `Ψ(μ̂) ≥ stop_threshold`.
pub fn simulate_run(
    cfg: &SimConfig,
    model: &ModelSpec,
    policy: &dyn Policy,
    stop_threshold: Option<f64>,
    run: u64,
) -> Result<TrajectoryRecord, SimError> {
    cfg.validate()?;
    let mut noise = NoiseSource::for_run(cfg, run);
    let mut state = initial_state(cfg, &mut noise)?;
    let len = cfg.n * cfg.dim;
    let mut controls = vec![0.0; len];
    let mut xi = vec![0.0; len];
    let mut buf = vec![0.0; len];
    let psi0 = model.constraint.value(MeasureRef::Empirical(&state));
    let mut rec = PathRecorder::new(cfg, run, &state, psi0);
    let crossed = |psi: f64| stop_threshold.is_some_and(|th| psi >= th);
    if crossed(psi0) {
        rec.record.tau_index = Some(0);
    }
    for k in 0..cfg.n_steps() {
        let t = cfg.time(k);
        policy.controls(t, &state, &mut controls);
        rec.charge(
            model.particle_running_cost(&state, &controls),
            mean_sq_norm(&controls, cfg.n),
            cfg.dt,
        );
        noise.fill(&mut xi);
        let prev = state.clone();
        em_step_in_place(
            &mut state,
            &controls,
            model.drift.as_ref(),
            cfg.dt,
            &xi,
            &mut buf,
            k + 1,
        )?;
        let psi = model.constraint.value(MeasureRef::Empirical(&state));
        rec.after_step(k + 1, &prev, &state, psi);
        if rec.record.tau_index.is_none() && crossed(psi) {
            rec.record.tau_index = Some(k + 1);
        }
    }
    rec.record.terminal_cost = model.terminal_cost.value(MeasureRef::Empirical(&state));
    Ok(rec.record)
}

/// Worker count from [`WORKERS_ENV`], falling back to the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(worker_count())
            .build()
            .expect("thread pool")
    })
}

/// Maps `f` over `0..runs` in parallel; output is in run order.
pub fn parallel_runs<T, F>(runs: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    pool().install(|| (0..runs).into_par_iter().map(&f).collect())
}

/// Same as [`parallel_runs`] on an explicit thread count; used to check scheduling independence.
pub fn parallel_runs_with<T, F>(workers: usize, runs: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| (0..runs).into_par_iter().map(&f).collect())
}

/// Sample mean and standard error (unbiased variance); SE is 0 for one sample.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run: u64,
    pub total_cost: f64,
    pub running_cost: f64,
    pub terminal_cost: f64,
    pub control_energy: f64,
    pub tau_index: Option<usize>,
    pub max_psi: f64,
    pub violations: usize,
    pub max_psi_increment: f64,
    pub max_step_displacement: f64,
}

impl From<&TrajectoryRecord> for RunSummary {
    fn from(r: &TrajectoryRecord) -> Self {
        Self {
            run: r.run,
            total_cost: r.total_cost(),
            running_cost: r.running_cost,
            terminal_cost: r.terminal_cost,
            control_energy: r.control_energy,
            tau_index: r.tau_index,
            max_psi: r.max_psi(),
            violations: r.violations(),
            max_psi_increment: r.max_psi_increment,
            max_step_displacement: r.max_step_displacement,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchAggregate {
    pub runs_ok: usize,
    pub aborted: usize,
    pub mean_cost: f64,
    pub std_error: f64,
    /// Runs with `Ψ ≥ 0` at some grid time.
    pub violations: usize,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub summaries: Vec<RunSummary>,
    pub aborted: Vec<(u64, SimError)>,
    pub aggregate: BatchAggregate,
    /// Full records, kept only on request.
    pub records: Vec<TrajectoryRecord>,
}

/// Runs `runs` independent simulations and folds them in run order.
pub fn mc_batch(
    cfg: &SimConfig,
    model: &ModelSpec,
    policy: &dyn Policy,
    runs: u64,
    stop_threshold: Option<f64>,
) -> Result<BatchResult, SimError> {
    mc_batch_with(cfg, model, policy, runs, stop_threshold, false)
}

pub fn mc_batch_with(
    cfg: &SimConfig,
    model: &ModelSpec,
    policy: &dyn Policy,
    runs: u64,
    stop_threshold: Option<f64>,
    keep_records: bool,
) -> Result<BatchResult, SimError> {
    if runs == 0 {
        return Err(SimError::Config("need at least one run".into()));
    }
    cfg.validate()?;
    let outcomes = parallel_runs(runs, |r| {
        simulate_run(cfg, model, policy, stop_threshold, r)
    });
    let mut summaries = Vec::with_capacity(outcomes.len());
    let mut aborted = Vec::new();
    let mut records = Vec::new();
    for (r, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(rec) => {
                summaries.push(RunSummary::from(&rec));
                if keep_records {
                    records.push(rec);
                }
            }
            Err(e) => aborted.push((r as u64, e)),
        }
    }
    let costs: Vec<f64> = summaries.iter().map(|s| s.total_cost).collect();
    let (mean_cost, std_error) = mean_and_se(&costs);
    let aggregate = BatchAggregate {
        runs_ok: summaries.len(),
        aborted: aborted.len(),
        mean_cost,
        std_error,
        violations: summaries.iter().filter(|s| s.violations > 0).count(),
    };
    Ok(BatchResult {
        summaries,
        aborted,
        aggregate,
        records,
    })
}

#[derive(Serialize)]
struct DumpLine {
    run: u64,
    step: usize,
    time: f64,
    psi: f64,
    cost_so_far: f64,
}

/// One JSON object per step: `run, step, time, psi, cost_so_far`.
pub fn write_trajectory_jsonl<W: Write>(mut w: W, rec: &TrajectoryRecord) -> std::io::Result<()> {
    for (step, ((time, psi), cost)) in rec
        .times
        .iter()
        .zip(&rec.psi_path)
        .zip(&rec.cost_path)
        .enumerate()
    {
        let line = DumpLine {
            run: rec.run,
            step,
            time: *time,
            psi: *psi,
            cost_so_far: *cost,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
