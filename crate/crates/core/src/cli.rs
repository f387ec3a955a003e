//! Experiment driver: TOML configs, subcommands and CSV artifacts.

use std::fmt::Display;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::freeze::{transfer_batch, write_freeze_csv, FreezeError, FreezeScheme, TransferOptions};
use crate::ldp::{ldp_compare, write_report_csv, LdpError, LdpParticles, PilotRule};
use crate::measure::{
    ConstraintFunctional, GridMeasure1D, Integrand, MeasureError, MeasureFunctional,
};
use crate::mfsolver::{
    solve_mfoc, stability_sweep, write_solution_csv, write_summary_csv, FluxScheme, GridFeedback,
    MfSolution, SolverError, SolverOptions, SpaceTimeGrid, SweepRow,
};
use crate::model::{
    AttractionDrift, ConfinementDrift, DriftField, LegendreLagrangian, MeanFieldCost, ModelError,
    ModelSpec, QuadraticHamiltonian, QuadraticLagrangian, TiltedHamiltonian, ZeroDrift,
};
use crate::oracle;
use crate::particle::{
    mc_batch_with, write_trajectory_jsonl, ConstantPolicy, InitialState, Policy, SimConfig,
    SimError, ZeroPolicy,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{module}: {message}")]
    Numerical {
        module: &'static str,
        message: String,
    },
}

impl CliError {
    /// 1 for config and I/O problems, 2 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Numerical { .. } => 2,
        }
    }

    fn numerical(module: &'static str, e: impl Display) -> Self {
        CliError::Numerical {
            module,
            message: e.to_string(),
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::Grid(_)
            | SolverError::Options(_)
            | SolverError::Dimension
            | SolverError::Precondition { .. } => CliError::Config(format!("mfsolver: {e}")),
            e => CliError::numerical("mfsolver", e),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::Config(format!("particle: {e}")),
            e => CliError::numerical("particle", e),
        }
    }
}

impl From<FreezeError> for CliError {
    fn from(e: FreezeError) -> Self {
        match e {
            FreezeError::Params(_) | FreezeError::Precondition { .. } => {
                CliError::Config(format!("freeze: {e}"))
            }
            FreezeError::Sim(e) => e.into(),
            e => CliError::numerical("freeze", e),
        }
    }
}

impl From<LdpError> for CliError {
    fn from(e: LdpError) -> Self {
        match e {
            LdpError::Model(_) | LdpError::Precondition(_) => CliError::Config(format!("ldp: {e}")),
            e => CliError::numerical("ldp", e),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(format!("model: {e}"))
    }
}

impl From<MeasureError> for CliError {
    fn from(e: MeasureError) -> Self {
        CliError::Config(format!("measure: {e}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subcommand {
    SolveMf,
    Stability,
    Simulate,
    Transfer,
    Ldp,
    Selftest,
}

// ---- config ----

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for every random stream.
    pub seed: u64,
    pub model: Option<ModelBlock>,
    #[serde(default)]
    pub initial: InitialBlock,
    pub grid: Option<GridBlock>,
    pub particle: Option<ParticleBlock>,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub freeze: FreezeBlock,
    pub ldp: Option<LdpBlock>,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default)]
    pub hamiltonian: HamiltonianSpec,
    #[serde(default)]
    pub drift: DriftSpec,
    pub running_cost: Option<FunctionalSpec>,
    pub terminal_cost: Option<FunctionalSpec>,
    pub constraint: ConstraintSpec,
    #[serde(default)]
    pub t0: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HamiltonianSpec {
    #[default]
    Quadratic,
    Tilted {
        eps: f64,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftSpec {
    #[default]
    Zero,
    Confinement {
        strength: f64,
    },
    Attraction {
        strength: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum IntegrandSpec {
    SmoothNorm {
        #[serde(default, alias = "x0")]
        center: Vec<f64>,
        smoothing: f64,
    },
    Affine {
        coeffs: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    HalfSquare {
        #[serde(default)]
        center: Vec<f64>,
    },
    SoftCappedSquare {
        cap: f64,
        softness: f64,
    },
    Tanh,
}

impl IntegrandSpec {
    pub fn build(&self) -> Integrand {
        match self.clone() {
            IntegrandSpec::SmoothNorm { center, smoothing } => {
                Integrand::SmoothNorm { center, smoothing }
            }
            IntegrandSpec::Affine { coeffs, offset } => Integrand::Affine { coeffs, offset },
            IntegrandSpec::HalfSquare { center } => Integrand::HalfSquare { center },
            IntegrandSpec::SoftCappedSquare { cap, softness } => {
                Integrand::SoftCappedSquare { cap, softness }
            }
            IntegrandSpec::Tanh => Integrand::Tanh,
        }
    }
}

/// `∫f dm − level`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalSpec {
    pub integrand: IntegrandSpec,
    #[serde(default)]
    pub level: f64,
}

/// `Ψ(m) = ∫ψ dm − κ`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub integrand: IntegrandSpec,
    pub kappa: f64,
    /// Lipschitz constant; computed on the grid box when absent.
    pub c_psi: Option<f64>,
    /// Free-text record of the regularity assumptions this instance claims.
    #[serde(default)]
    pub assumptions: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Deterministic mid-quantiles (one-dimensional only).
    #[default]
    Quantiles,
    Iid,
}

/// Gaussian `μ0 = N(mean, std² I)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialBlock {
    #[serde(default = "zero_vec")]
    pub mean: Vec<f64>,
    #[serde(default = "default_std")]
    pub std: f64,
    #[serde(default)]
    pub sampling: Sampling,
}

impl Default for InitialBlock {
    fn default() -> Self {
        Self {
            mean: zero_vec(),
            std: default_std(),
            sampling: Sampling::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub x_min: f64,
    pub x_max: f64,
    pub n_cells: usize,
    pub n_steps: usize,
    #[serde(default)]
    pub flux: FluxScheme,
    pub fp_substeps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    #[default]
    Zero,
    Constant,
    MfControl,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleBlock {
    pub n: Vec<usize>,
    pub dt: f64,
    pub runs: u64,
    #[serde(default = "one_u32")]
    pub noise_substeps: u32,
    #[serde(default)]
    pub policy: PolicyKind,
    #[serde(default)]
    pub constant: Vec<f64>,
    /// Feedback table written by `solve-mf`; solved in-process when absent.
    pub control_file: Option<PathBuf>,
    /// Stop each run once `Ψ` reaches this level.
    pub stop_threshold: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub eps: Option<f64>,
    pub eps_start: Option<f64>,
    #[serde(default)]
    pub no_continuation: bool,
    pub eps_factor: Option<f64>,
    pub tol_fp: Option<f64>,
    pub k_max: Option<usize>,
    pub omega: Option<f64>,
    pub anderson_depth: Option<usize>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub deltas: Vec<f64>,
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self {
            eps: None,
            eps_start: None,
            no_continuation: false,
            eps_factor: None,
            tol_fp: None,
            k_max: None,
            omega: None,
            anderson_depth: None,
            delta: default_delta(),
            deltas: Vec::new(),
        }
    }
}

impl SolverBlock {
    pub fn options(&self) -> SolverOptions {
        let d = SolverOptions::default();
        SolverOptions {
            eps: self.eps.unwrap_or(d.eps),
            eps_start: if self.no_continuation {
                None
            } else {
                self.eps_start.or(d.eps_start)
            },
            eps_factor: self.eps_factor.unwrap_or(d.eps_factor),
            tol_fp: self.tol_fp.unwrap_or(d.tol_fp),
            k_max: self.k_max.unwrap_or(d.k_max),
            omega: self.omega.unwrap_or(d.omega),
            anderson_depth: self.anderson_depth.unwrap_or(d.anderson_depth),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezeBlock {
    #[serde(default = "default_scheme")]
    pub scheme: FreezeScheme,
    pub guard: Option<f64>,
    /// Margin of the switch; defaults to `solver.delta`.
    pub delta: Option<f64>,
}

impl Default for FreezeBlock {
    fn default() -> Self {
        Self {
            scheme: default_scheme(),
            guard: None,
            delta: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdpBlock {
    pub ns: Vec<usize>,
    pub dt: f64,
    pub pilot_runs: Option<u64>,
    pub target_successes: Option<f64>,
    pub min_runs: Option<u64>,
    pub max_runs: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    #[serde(default)]
    pub dump_trajectories: bool,
    #[serde(default = "ten")]
    pub solution_every: usize,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            dir: default_out(),
            dump_trajectories: false,
            solution_every: ten(),
        }
    }
}

fn one() -> usize {
    1
}
fn one_u32() -> u32 {
    1
}
fn ten() -> usize {
    10
}
fn zero_vec() -> Vec<f64> {
    vec![0.0]
}
fn default_std() -> f64 {
    0.2
}
fn default_delta() -> f64 {
    0.2
}
fn default_scheme() -> FreezeScheme {
    FreezeScheme::SemiImplicit
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// A parsed config together with the hash of its effective text.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
}

/// Parses `text`, applies `key=value` overrides and validates the result.
pub fn load_config(text: &str, overrides: &[String]) -> Result<LoadedConfig, CliError> {
    let mut table: toml::Table =
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let canonical = toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?;
    let hash = hex::encode(Sha256::digest(canonical.as_bytes()));
    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    config.validate()?;
    Ok(LoadedConfig { config, hash })
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// `a.b.c=value`; the value is read as TOML, else as a bare string.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut table = root;
    for p in path {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if let Some(m) = &self.model {
            if m.dim == 0 {
                return bad("model.dim must be >= 1".into());
            }
            if self.initial.mean.len() != m.dim {
                return bad(format!(
                    "initial.mean has {} entries, model.dim is {}",
                    self.initial.mean.len(),
                    m.dim
                ));
            }
            if m.constraint.c_psi.is_none() && self.grid.is_none() {
                return bad("model.constraint.c_psi is required without a [grid] block".into());
            }
        }
        if let Some(p) = &self.particle {
            if p.n.is_empty() || p.n.contains(&0) {
                return bad("particle.n must list positive sizes".into());
            }
            if p.runs == 0 {
                return bad("particle.runs must be >= 1".into());
            }
            if p.policy == PolicyKind::Constant {
                let d = self.model.as_ref().map_or(1, |m| m.dim);
                if p.constant.len() != d {
                    return bad(format!("particle.constant needs {d} entries"));
                }
            }
        }
        if self.initial.std < 0.0 {
            return bad("initial.std must be >= 0".into());
        }
        Ok(())
    }

    fn model_block(&self) -> Result<&ModelBlock, CliError> {
        self.model
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [model] block".into()))
    }

    fn particle_block(&self) -> Result<&ParticleBlock, CliError> {
        self.particle
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [particle] block".into()))
    }

    fn grid_block(&self) -> Result<&GridBlock, CliError> {
        self.grid
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [grid] block".into()))
    }

    pub fn build_model(&self) -> Result<ModelSpec, CliError> {
        let m = self.model_block()?;
        let drift: Arc<dyn DriftField> = match m.drift {
            DriftSpec::Zero => Arc::new(ZeroDrift),
            DriftSpec::Confinement { strength } => Arc::new(ConfinementDrift { strength }),
            DriftSpec::Attraction { strength } => Arc::new(AttractionDrift { strength }),
        };
        let cost = |f: &Option<FunctionalSpec>| {
            MeanFieldCost(
                f.as_ref()
                    .map(|f| MeasureFunctional::linear(f.integrand.build(), f.level)),
            )
        };
        let integrand = m.constraint.integrand.build();
        let constraint = match m.constraint.c_psi {
            Some(c) => ConstraintFunctional::with_lipschitz(
                MeasureFunctional::linear(integrand, m.constraint.kappa),
                c,
            ),
            None => {
                let g = self.grid_block()?;
                ConstraintFunctional::linear(
                    integrand,
                    m.constraint.kappa,
                    &vec![g.x_min; m.dim],
                    &vec![g.x_max; m.dim],
                )
            }
        };
        let (running, terminal) = (cost(&m.running_cost), cost(&m.terminal_cost));
        let model = match m.hamiltonian {
            HamiltonianSpec::Quadratic => ModelSpec::new(
                Arc::new(QuadraticHamiltonian::default()),
                Arc::new(QuadraticLagrangian::default()),
                drift,
                running,
                terminal,
                constraint,
                m.t0,
                m.horizon,
            )?,
            HamiltonianSpec::Tilted { eps } => {
                let h = TiltedHamiltonian { eps };
                ModelSpec::new(
                    Arc::new(h),
                    Arc::new(LegendreLagrangian::new(h)),
                    drift,
                    running,
                    terminal,
                    constraint,
                    m.t0,
                    m.horizon,
                )?
            }
        };
        Ok(model)
    }

    pub fn build_grid(&self) -> Result<(SpaceTimeGrid, GridMeasure1D), CliError> {
        let m = self.model_block()?;
        if m.dim != 1 {
            return Err(CliError::Config(
                "the grid solver needs model.dim = 1".into(),
            ));
        }
        let g = self.grid_block()?;
        let mut grid = SpaceTimeGrid::new(g.x_min, g.x_max, g.n_cells, m.t0, m.horizon, g.n_steps)?
            .with_flux(g.flux);
        if let Some(s) = g.fp_substeps {
            grid = grid.with_fp_substeps(s);
        }
        let mu0 = GridMeasure1D::gaussian(
            g.x_min,
            g.x_max,
            g.n_cells,
            self.initial.mean[0],
            self.initial.std,
        )?;
        Ok((grid, mu0))
    }

    fn initial_state(&self) -> InitialState {
        let i = &self.initial;
        match i.sampling {
            Sampling::Quantiles if i.mean.len() == 1 => InitialState::GaussianQuantiles {
                mean: i.mean[0],
                std: i.std,
            },
            _ => InitialState::Sampled {
                mean: i.mean.clone(),
                std: i.std,
            },
        }
    }

    /// Particle config for `n` particles at step `dt`.
    pub fn sim_config(&self, n: usize, dt: f64) -> Result<SimConfig, CliError> {
        let m = self.model_block()?;
        let mut cfg = SimConfig::new(
            n,
            m.dim,
            dt,
            m.t0,
            m.horizon,
            self.seed,
            self.initial_state(),
        );
        if let Some(p) = &self.particle {
            cfg.noise_substeps = p.noise_substeps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---- running ----

/// Where and how artifacts are written.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub overrides: Vec<String>,
    pub out_dir: Option<PathBuf>,
    pub dump_trajectories: bool,
    /// Suppresses the console tables.
    pub quiet: bool,
}

struct Artifacts {
    dir: PathBuf,
    header: String,
    written: Vec<PathBuf>,
    quiet: bool,
}

impl Artifacts {
    fn new(dir: PathBuf, hash: &str, quiet: bool) -> Result<Self, CliError> {
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            header: format!("# mfc-lab {VERSION} config-sha256={hash}\n"),
            written: Vec::new(),
            quiet,
        })
    }

    fn say(&self, line: impl std::fmt::Display) {
        if !self.quiet {
            println!("{line}");
        }
    }

    fn write(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
    ) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(fs::File::create(&path)?);
        w.write_all(self.header.as_bytes())?;
        body(&mut w)?;
        w.flush()?;
        self.written.push(path);
        Ok(())
    }
}

/// Runs one subcommand and returns the files it wrote.
pub fn run(
    cmd: Subcommand,
    config_path: &Path,
    opts: &RunOptions,
) -> Result<Vec<PathBuf>, CliError> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let loaded = load_config(&text, &opts.overrides)?;
    let cfg = &loaded.config;
    let dir = opts
        .out_dir
        .clone()
        .unwrap_or_else(|| cfg.output.dir.clone());
    let mut out = Artifacts::new(dir, &loaded.hash, opts.quiet)?;
    let dump = opts.dump_trajectories || cfg.output.dump_trajectories;
    match cmd {
        Subcommand::SolveMf => solve_mf(cfg, &mut out)?,
        Subcommand::Stability => stability(cfg, &mut out)?,
        Subcommand::Simulate => simulate(cfg, dump, &mut out)?,
        Subcommand::Transfer => transfer(cfg, dump, &mut out)?,
        Subcommand::Ldp => ldp(cfg, &mut out)?,
        Subcommand::Selftest => selftest(cfg, &mut out)?,
    }
    Ok(out.written)
}

fn print_rows(out: &Artifacts, header: &str, rows: &[SweepRow]) {
    out.say(header);
    for r in rows {
        out.say(format_args!(
            "{:.4e} U={:.6} direct={:.6} it={} converged={} fp_gap={:.2e} excl={:.2e}",
            r.delta,
            r.value,
            r.direct_cost,
            r.iterations,
            r.converged,
            r.fixed_point_gap,
            r.exclusion_gap
        ));
    }
}

fn solve_at(cfg: &ExperimentConfig, model: &ModelSpec, delta: f64) -> Result<MfSolution, CliError> {
    let (grid, mu0) = cfg.build_grid()?;
    Ok(solve_mfoc(
        model,
        &mu0,
        delta,
        &cfg.solver.options(),
        &grid,
    )?)
}

fn solve_mf(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let model = cfg.build_model()?;
    let sol = solve_at(cfg, &model, cfg.solver.delta)?;
    let row = SweepRow::from_solution(&sol);
    print_rows(out, "delta U direct iterations", std::slice::from_ref(&row));
    out.write("solution.csv", |w| {
        write_solution_csv(w, &sol, cfg.output.solution_every)
    })?;
    out.write("summary.csv", |w| {
        write_summary_csv(w, std::slice::from_ref(&row))
    })?;
    let feedback = sol.feedback();
    out.write("feedback.csv", |w| feedback.write_csv(w))?;
    if !sol.residuals.converged {
        return Err(CliError::numerical(
            "mfsolver",
            format!(
                "no convergence after {} iterations (gap {:e})",
                sol.residuals.iterations, sol.residuals.fixed_point_gap
            ),
        ));
    }
    Ok(())
}

fn stability(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    if cfg.solver.deltas.is_empty() {
        return Err(CliError::Config("solver.deltas is empty".into()));
    }
    let model = cfg.build_model()?;
    let (grid, mu0) = cfg.build_grid()?;
    let rows: Vec<SweepRow> = stability_sweep(
        &model,
        &mu0,
        &cfg.solver.deltas,
        &cfg.solver.options(),
        &grid,
    )?
    .into_iter()
    .map(|(r, _)| r)
    .collect();
    print_rows(out, "delta U direct iterations", &rows);
    out.write("stability.csv", |w| write_summary_csv(w, &rows))
}

/// The policy named in `[particle]`, plus `U^δ` when it came from an in-process solve.
fn load_policy(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    delta: f64,
) -> Result<(Box<dyn Policy>, Option<f64>), CliError> {
    let p = cfg.particle_block()?;
    Ok(match p.policy {
        PolicyKind::Zero => (Box::new(ZeroPolicy), None),
        PolicyKind::Constant => (Box::new(ConstantPolicy(p.constant.clone())), None),
        PolicyKind::MfControl => {
            if model_dim(cfg)? != 1 {
                return Err(CliError::Config(
                    "mf-control policies are one-dimensional".into(),
                ));
            }
            match &p.control_file {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| {
                        CliError::Config(format!("cannot read {}: {e}", path.display()))
                    })?;
                    let fb = GridFeedback::read_csv(&text)
                        .map_err(|e| CliError::Config(e.to_string()))?;
                    (Box::new(fb), None)
                }
                None => {
                    let sol = solve_at(cfg, model, delta)?;
                    (Box::new(sol.feedback()), Some(sol.value))
                }
            }
        }
    })
}

fn model_dim(cfg: &ExperimentConfig) -> Result<usize, CliError> {
    Ok(cfg.model_block()?.dim)
}

fn simulate(cfg: &ExperimentConfig, dump: bool, out: &mut Artifacts) -> Result<(), CliError> {
    let model = cfg.build_model()?;
    let p = cfg.particle_block()?;
    let (policy, _) = load_policy(cfg, &model, cfg.solver.delta)?;
    let mut table = Vec::new();
    out.say("N runs mean_cost se violations");
    for &n in &p.n {
        let sim = cfg.sim_config(n, p.dt)?;
        let batch = mc_batch_with(
            &sim,
            &model,
            policy.as_ref(),
            p.runs,
            p.stop_threshold,
            dump,
        )?;
        if let Some((run, e)) = batch.aborted.first() {
            return Err(CliError::numerical(
                "particle",
                format!("N = {n}, run {run}: {e}"),
            ));
        }
        let a = &batch.aggregate;
        out.say(format_args!(
            "{n} {} {:.6} {:.2e} {}",
            a.runs_ok, a.mean_cost, a.std_error, a.violations
        ));
        if dump {
            out.write(&format!("trajectories_N{n}.jsonl"), |w| {
                batch
                    .records
                    .iter()
                    .try_for_each(|r| write_trajectory_jsonl(&mut *w, r))
            })?;
        }
        table.push((n, batch));
    }
    out.write("simulate.csv", |w| {
        writeln!(w, "N,run,total_cost,running_cost,terminal_cost,control_energy,tau_index,max_psi,violations,max_psi_increment,max_step_displacement")?;
        for (n, batch) in &table {
            for s in &batch.summaries {
                let tau = s.tau_index.map(|t| t.to_string()).unwrap_or_default();
                writeln!(
                    w,
                    "{n},{},{},{},{},{},{tau},{},{},{},{}",
                    s.run,
                    s.total_cost,
                    s.running_cost,
                    s.terminal_cost,
                    s.control_energy,
                    s.max_psi,
                    s.violations,
                    s.max_psi_increment,
                    s.max_step_displacement
                )?;
            }
        }
        Ok(())
    })?;
    out.write("simulate_summary.csv", |w| {
        writeln!(w, "N,runs,mean_cost,se,violating_runs")?;
        for (n, batch) in &table {
            let a = &batch.aggregate;
            writeln!(
                w,
                "{n},{},{},{},{}",
                a.runs_ok, a.mean_cost, a.std_error, a.violations
            )?;
        }
        Ok(())
    })
}

pub const TRANSFER_HEADER: &str = "N,mean_J,se,E_tau_gap,U_delta,gap";

fn transfer(cfg: &ExperimentConfig, dump: bool, out: &mut Artifacts) -> Result<(), CliError> {
    let model = cfg.build_model()?;
    let p = cfg.particle_block()?;
    let delta = cfg.freeze.delta.unwrap_or(cfg.solver.delta);
    let (policy, u_solved) = load_policy(cfg, &model, delta)?;
    let u_delta = match (u_solved, &cfg.grid) {
        (Some(u), _) => Some(u),
        (None, Some(_)) if model_dim(cfg)? == 1 => Some(solve_at(cfg, &model, delta)?.value),
        _ => None,
    };
    let mut topts = TransferOptions::new(delta, model.constraint.lipschitz());
    topts.scheme = cfg.freeze.scheme;
    if let Some(g) = cfg.freeze.guard {
        topts.guard = g;
    }
    let mut rows = Vec::new();
    out.say(TRANSFER_HEADER);
    for &n in &p.n {
        let sim = cfg.sim_config(n, p.dt)?;
        let batch = transfer_batch(&sim, &model, policy.as_ref(), &topts, p.runs)?;
        if let Some((run, e)) = batch.aborted.first() {
            return Err(CliError::numerical(
                "freeze",
                format!("N = {n}, run {run}: {e}"),
            ));
        }
        let gap = u_delta.map(|u| batch.mean_cost - u);
        let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let line = format!(
            "{n},{},{},{},{},{}",
            batch.mean_cost,
            batch.std_error,
            batch.mean_residual_time,
            fmt(u_delta),
            fmt(gap)
        );
        out.say(&line);
        let (dim, sup) = (sim.dim, model.drift.sup_norm());
        out.write(&format!("freeze_N{n}.csv"), |w| {
            write_freeze_csv(w, &batch, dim, n, sup)
        })?;
        if dump {
            out.write(&format!("trajectories_N{n}.jsonl"), |w| {
                batch
                    .records
                    .iter()
                    .try_for_each(|r| write_trajectory_jsonl(&mut *w, &r.trajectory))
            })?;
        }
        rows.push(line);
    }
    out.write("transfer.csv", |w| {
        writeln!(w, "{TRANSFER_HEADER}")?;
        rows.iter().try_for_each(|r| writeln!(w, "{r}"))
    })
}

fn ldp(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let block = cfg
        .ldp
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [ldp] block".into()))?;
    if cfg.solver.deltas.is_empty() {
        return Err(CliError::Config("solver.deltas is empty".into()));
    }
    let model = cfg.build_model()?;
    let (grid, mu0) = cfg.build_grid()?;
    let d = PilotRule::default();
    let rule = PilotRule {
        pilot_runs: block.pilot_runs.unwrap_or(d.pilot_runs),
        target_successes: block.target_successes.unwrap_or(d.target_successes),
        min_runs: block.min_runs.unwrap_or(d.min_runs),
        max_runs: block.max_runs.unwrap_or(d.max_runs),
    };
    let particles = LdpParticles {
        config: cfg.sim_config(1, block.dt)?,
        ns: block.ns.clone(),
        rule,
    };
    let report = ldp_compare(
        &model,
        &mu0,
        &grid,
        &cfg.solver.deltas,
        &cfg.solver.options(),
        &particles,
    )?;
    print_rows(out, "delta U direct iterations", &report.sweep);
    out.say(format_args!(
        "U_ref = {} at delta = {}",
        report.u_ref, report.delta_ref
    ));
    for r in &report.rows {
        out.say(format_args!(
            "N={} M={} v={:.4e} rate={:.4} gap={:.4}",
            r.survival.n, r.survival.runs, r.survival.v_hat, r.rate, r.gap
        ));
    }
    out.write("ldp.csv", |w| write_report_csv(w, &report))?;
    out.write("ldp_sweep.csv", |w| write_summary_csv(w, &report.sweep))
}

fn selftest(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let checks = oracle::selftest(cfg.seed);
    for c in &checks {
        out.say(format_args!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        ));
    }
    out.write("selftest.csv", |w| {
        writeln!(w, "check,passed,detail")?;
        checks.iter().try_for_each(|c| {
            writeln!(
                w,
                "{},{},\"{}\"",
                c.name,
                c.passed,
                c.detail.replace('"', "'")
            )
        })
    })?;
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::numerical(
            "oracle",
            format!("failed checks: {}", failed.join(", ")),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 5

[model]
horizon = 1.0
constraint = { integrand = { kind = "smooth-norm", smoothing = 0.1 }, kappa = 0.7 }

[grid]
x_min = -8.0
x_max = 8.0
n_cells = 64
n_steps = 20
"#;

    #[test]
    fn overrides_parse_as_toml_or_string() {
        let mut t: toml::Table = toml::from_str(BASE).unwrap();
        apply_override(&mut t, "solver.deltas=[0.1, 0.05]").unwrap();
        apply_override(&mut t, "grid.flux=upwind").unwrap();
        apply_override(&mut t, "seed=9").unwrap();
        assert_eq!(t["solver"]["deltas"].as_array().unwrap().len(), 2);
        assert_eq!(t["grid"]["flux"].as_str(), Some("upwind"));
        assert_eq!(t["seed"].as_integer(), Some(9));
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "seed.x=1").is_err());
    }

    #[test]
    fn config_builds_and_hash_tracks_overrides() {
        let a = load_config(BASE, &[]).unwrap();
        let b = load_config(BASE, &["solver.delta=0.1".into()]).unwrap();
        assert_ne!(a.hash, b.hash);
        assert_eq!(b.config.solver.delta, 0.1);
        let model = a.config.build_model().unwrap();
        assert!((model.constraint.lipschitz() - 1.0).abs() < 1e-2);
        let (grid, mu0) = a.config.build_grid().unwrap();
        assert_eq!(grid.flux, FluxScheme::ExponentialFitting);
        assert!((mu0.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seed_is_required_and_unknown_keys_rejected() {
        let no_seed = BASE.replace("seed = 5", "");
        assert!(matches!(
            load_config(&no_seed, &[]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            load_config(BASE, &["model.colour=1".into()]),
            Err(CliError::Config(_))
        ));
        assert_eq!(CliError::Config(String::new()).exit_code(), 1);
        assert_eq!(CliError::numerical("x", "y").exit_code(), 2);
    }

    #[test]
    fn dimension_checks() {
        let err = load_config(BASE, &["model.dim=2".into()]).unwrap_err();
        assert!(err.to_string().contains("initial.mean"));
        let cfg = load_config(
            BASE,
            &["model.dim=2".into(), "initial.mean=[0.0, 0.0]".into()],
        )
        .unwrap()
        .config;
        assert!(cfg.build_grid().is_err());
        assert!(matches!(
            cfg.sim_config(4, 0.01).unwrap().initial,
            InitialState::Sampled { .. }
        ));
    }
}
