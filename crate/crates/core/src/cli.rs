//! Scenario files, subcommand dispatch and deterministic report output for
//! the `kinetic` binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::collision::{
    flux_measure, kw_bound_check, maxwellian, null_space_check, sqrt_maxwellian, CollisionError, KernelConfig,
    VelocityGrid, WeightParams,
};
use crate::cycles::{
    bounce_back_cycle, diffuse_cycle_sample, specular_cycle, specular_jacobian_fd_with, stuck_fraction_sweep,
    CycleError, DiffuseSampler, JacobianSetup,
};
use crate::geometry::{DomainKind, DomainSpec, GeometryError, LevelSetDomain, SymmetryAxis};
use crate::rng;
use crate::semigroup::{
    coercivity_ratio, decay_fit, moments, BcKind, BcSpec, FieldSample, GainForm, GammaForm, KernelMatrix, NuProfile,
    PhaseGrid, SemigroupError, SolverSetup, SpatialCells, TimeGrid, TransportProblem, WeightMode,
};
use crate::trajectory::{backward_exit, exit_gradients, forward_exit, PhasePoint, TrajectoryError};
use crate::Vec3;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Numerical(_) => EXIT_CHECK_FAILED,
            CliError::ConfigInvalid(_) | CliError::Io(_) => EXIT_INVALID,
        }
    }
}

impl From<SemigroupError> for CliError {
    fn from(e: SemigroupError) -> Self {
        match e {
            SemigroupError::InvalidArgument(_)
            | SemigroupError::Unsupported(_)
            | SemigroupError::NegativeInitialData { .. } => CliError::ConfigInvalid(e.to_string()),
            SemigroupError::Collision(c) => c.into(),
            SemigroupError::Cycle(c) => c.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<CollisionError> for CliError {
    fn from(e: CollisionError) -> Self {
        match e {
            CollisionError::InvalidParams(_) => CliError::ConfigInvalid(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<CycleError> for CliError {
    fn from(e: CycleError) -> Self {
        match e {
            CycleError::InvalidArgument(_) => CliError::ConfigInvalid(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<TrajectoryError> for CliError {
    fn from(e: TrajectoryError) -> Self {
        match e {
            TrajectoryError::ZeroVelocity | TrajectoryError::OutsideDomain(_) => CliError::ConfigInvalid(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::ConfigInvalid(e.to_string())
    }
}

/// Initial data `h0` (weighted) used by the semigroup subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InitialKind {
    /// `h0 ≡ 1`.
    Constant,
    /// `e^{-|v|²/8}`.
    Gaussian,
    /// `w v₁ √μ`: no mass, no energy.
    Odd,
    /// `w √μ (v₁ + 0.3(|v|² - 3) + (e₃ × (x - c))·v)`.
    Mixed,
    /// `e^{-4|x - c|²} e^{-|v - e₁|²}`.
    Bump,
}

impl InitialKind {
    pub fn eval(self, params: &WeightParams, center: &Vec3, x: &Vec3, v: &Vec3) -> f64 {
        let y = x - center;
        match self {
            InitialKind::Constant => 1.0,
            InitialKind::Gaussian => (-v.norm_squared() / 8.0).exp(),
            InitialKind::Odd => params.w(v) * v[0] * sqrt_maxwellian(v),
            InitialKind::Mixed => {
                let rot = y[0] * v[1] - y[1] * v[0];
                params.w(v) * sqrt_maxwellian(v) * (v[0] + 0.3 * (v.norm_squared() - 3.0) + rot)
            }
            InitialKind::Bump => (-4.0 * y.norm_squared()).exp() * (-(v - Vector3::x()).norm_squared()).exp(),
        }
    }

    /// `sup_{x,v} w̃(v)|h0(x, v)|` from a radial scan of an envelope
    /// `|h0| ≤ A(|v|)`; infinite when unbounded.
    pub fn wtilde_sup(self, params: &WeightParams, radius: f64) -> f64 {
        let envelope = |s: f64| -> f64 {
            let v = Vector3::new(s, 0.0, 0.0);
            match self {
                InitialKind::Constant => 1.0,
                InitialKind::Gaussian => (-s * s / 8.0).exp(),
                InitialKind::Odd => params.w(&v) * s * sqrt_maxwellian(&v),
                InitialKind::Mixed => params.w(&v) * sqrt_maxwellian(&v) * (s + 0.3 * (s * s + 3.0) + radius * s),
                InitialKind::Bump => (-(s - 1.0).max(0.0).powi(2)).exp(),
            }
        };
        let mut sup: f64 = 0.0;
        for i in 0..=4000 {
            let s = i as f64 * 0.025;
            let val = params.wtilde(&Vector3::new(s, 0.0, 0.0)) * envelope(s);
            if !val.is_finite() {
                return f64::INFINITY;
            }
            sup = sup.max(val);
        }
        // still growing at |v| = 100 means unbounded
        let tail = params.wtilde(&Vector3::new(100.0, 0.0, 0.0)) * envelope(100.0);
        let before = params.wtilde(&Vector3::new(99.0, 0.0, 0.0)) * envelope(99.0);
        if tail > before {
            f64::INFINITY
        } else {
            sup
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SolveMode {
    Linear,
    Nonlinear,
    Positivity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub kind: BcKind,
    pub k_trunc: usize,
    pub mc_paths: usize,
    pub remainder_cap: f64,
    /// Inflow datum `(wg)(t, x, v) = A e^{-λ₀ t} e^{-|v|²/8}`.
    pub inflow_amplitude: f64,
    pub inflow_decay: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            kind: BcKind::BounceBack,
            k_trunc: 20,
            mc_paths: 10_000,
            remainder_cap: 0.05,
            inflow_amplitude: 0.0,
            inflow_decay: 0.0,
        }
    }
}

impl BcConfig {
    pub fn to_spec(&self) -> BcSpec {
        match self.kind {
            BcKind::Inflow => {
                let (a, l) = (self.inflow_amplitude, self.inflow_decay);
                BcSpec::Inflow(Arc::new(move |t, _, v| a * (-l * t).exp() * (-v.norm_squared() / 8.0).exp()))
            }
            BcKind::BounceBack => BcSpec::BounceBack,
            BcKind::Specular => BcSpec::Specular,
            BcKind::Diffuse => BcSpec::Diffuse {
                k_trunc: self.k_trunc,
                mc_paths: self.mc_paths,
                remainder_cap: self.remainder_cap,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunParams {
    pub t_start: f64,
    pub t_end: f64,
    pub t_samples: usize,
    pub sample_points: usize,
    pub paths: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub eps0: f64,
    pub jacobian_k: usize,
    pub jacobian_setup: JacobianSetup,
    pub picard_iters: usize,
    pub picard_tol: Option<f64>,
    /// Gauss nodes per unit time.
    pub time_nodes: usize,
    pub panel_nodes: usize,
    pub cell_size: f64,
    pub velocity_max: f64,
    pub velocity_nodes: usize,
    pub max_bounces: usize,
    pub x: [f64; 3],
    pub v: [f64; 3],
    pub initial: InitialKind,
    pub amplitude: f64,
    pub solve_mode: SolveMode,
    pub m_steps: usize,
    /// Rescale the cross section so that `ν(0) = 1`.
    pub normalize_kernel: bool,
    pub check_tol: f64,
    pub jacobian_tol: f64,
    pub null_space_tol: f64,
    pub kw_speeds: Vec<f64>,
    pub kw_epsilon: f64,
}

impl Default for RunParams {
    fn default() -> Self {
        Self {
            t_start: 0.0,
            t_end: 2.0,
            t_samples: 21,
            sample_points: 1000,
            paths: 100_000,
            k_min: 2,
            k_max: 30,
            eps0: 1e-3,
            jacobian_k: 2,
            jacobian_setup: JacobianSetup::NearTangent,
            picard_iters: 3,
            picard_tol: None,
            time_nodes: 16,
            panel_nodes: 4,
            cell_size: 0.25,
            velocity_max: 5.0,
            velocity_nodes: 8,
            max_bounces: 10_000,
            x: [0.0; 3],
            v: [1.0, 0.3, 0.2],
            initial: InitialKind::Gaussian,
            amplitude: 1.0,
            solve_mode: SolveMode::Linear,
            m_steps: 3,
            normalize_kernel: true,
            check_tol: 0.05,
            jacobian_tol: 0.1,
            null_space_tol: 1e-3,
            kw_speeds: vec![0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            kw_epsilon: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub domain: DomainSpec,
    pub bc: BcConfig,
    pub weight: WeightParams,
    pub kernel: KernelConfig,
    pub run: RunParams,
    pub output: OutputConfig,
}

impl ScenarioConfig {
    /// TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.extension().and_then(|e| e.to_str()) == Some("json"))
    }

    pub fn parse(text: &str, json: bool) -> Result<Self, CliError> {
        let cfg: Self = if json {
            serde_json::from_str(text).map_err(|e| CliError::ConfigInvalid(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| CliError::ConfigInvalid(e.to_string()))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.domain.build()?;
        self.weight.validate()?;
        self.kernel.validate()?;
        self.bc.to_spec().validate()?;
        let r = &self.run;
        let bad = |m: &str| Err(CliError::ConfigInvalid(m.to_string()));
        if !(r.t_start >= 0.0 && r.t_end > r.t_start) {
            return bad("run times need 0 <= t_start < t_end");
        }
        if r.t_samples < 2 || r.sample_points == 0 || r.paths == 0 {
            return bad("t_samples >= 2, sample_points >= 1 and paths >= 1 are required");
        }
        if r.k_min < 2 || r.k_max < r.k_min {
            return bad("stuck-mass range needs 2 <= k_min <= k_max");
        }
        if r.picard_iters == 0 || r.time_nodes == 0 || r.panel_nodes == 0 || r.m_steps == 0 {
            return bad("picard_iters, time_nodes, panel_nodes and m_steps must be positive");
        }
        if !(r.cell_size > 0.0 && r.velocity_max > 0.0) || r.velocity_nodes < 3 {
            return bad("cell_size, velocity_max must be positive and velocity_nodes >= 3");
        }
        if Vec3::from(r.v).norm() == 0.0 {
            return bad("run.v must be non-zero");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn kernel_config(&self) -> KernelConfig {
        if self.run.normalize_kernel {
            self.kernel.normalized()
        } else {
            self.kernel
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Text,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
            Format::Text => "txt",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "kinetic", version, about = "Characteristics, boundary laws and transport semigroups in convex domains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Scenario file (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true, env = "KC_THREADS")]
    pub threads: Option<usize>,
    /// Output directory; reports go to stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "json")]
    pub format: Format,
    /// Domain shortcut overriding the scenario's domain type.
    #[arg(long, global = true, value_enum)]
    pub domain: Option<DomainArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Ball,
    Ellipsoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BcArg {
    Inflow,
    Bounceback,
    Specular,
    Diffuse,
}

impl From<BcArg> for BcKind {
    fn from(b: BcArg) -> Self {
        match b {
            BcArg::Inflow => BcKind::Inflow,
            BcArg::Bounceback => BcKind::BounceBack,
            BcArg::Specular => BcKind::Specular,
            BcArg::Diffuse => BcKind::Diffuse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SetupArg {
    NearTangent,
    Normal,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PointArgs {
    /// Position `x1,x2,x3`.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub x: Option<[f64; 3]>,
    /// Velocity `v1,v2,v3`.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub v: Option<[f64; 3]>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Backward exit time, exit point and their derivatives at one phase point.
    Trace {
        #[command(flatten)]
        point: PointArgs,
    },
    /// Backward cycle from one phase point.
    Cycles {
        #[arg(long, value_enum)]
        bc: Option<BcArg>,
        #[arg(long)]
        t: Option<f64>,
        #[command(flatten)]
        point: PointArgs,
    },
    /// Finite-difference determinant of the specular velocity map.
    Jacobian {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        eps0: Option<f64>,
        #[arg(long, value_enum)]
        setup: Option<SetupArg>,
    },
    /// Flux-measure constants, weighted kernel bound and collision invariants.
    KernelCheck,
    /// Diffuse stuck-mass fractions over a range of bounce counts.
    StuckMass {
        /// Range `kmin..kmax`.
        #[arg(long, value_parser = parse_range_usize)]
        k: Option<(usize, usize)>,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        paths: Option<usize>,
        #[command(flatten)]
        point: PointArgs,
    },
    /// Decay of the damped transport semigroup on sampled phase points.
    Decay {
        #[arg(long, value_enum)]
        bc: Option<BcArg>,
        /// Time range `t0..t1`.
        #[arg(long, value_parser = parse_range_f64)]
        t: Option<(f64, f64)>,
    },
    /// Duhamel solve (linear, nonlinear or positivity iteration) on a phase grid.
    Solve {
        #[arg(long, value_enum)]
        bc: Option<BcArg>,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<SolveMode>,
    },
    /// Coercivity ratio over [0, 1] from a Duhamel solution.
    Coercivity {
        #[arg(long, value_enum)]
        bc: Option<BcArg>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Trace { .. } => "trace",
            Command::Cycles { .. } => "cycles",
            Command::Jacobian { .. } => "jacobian",
            Command::KernelCheck => "kernel-check",
            Command::StuckMass { .. } => "stuck-mass",
            Command::Decay { .. } => "decay",
            Command::Solve { .. } => "solve",
            Command::Coercivity { .. } => "coercivity",
        }
    }
}

pub fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated numbers, got '{s}'"));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("'{p}' is not a number"))?;
    }
    Ok(out)
}

fn split_range(s: &str) -> Result<(&str, &str), String> {
    s.split_once("..").ok_or_else(|| format!("expected a range 'a..b', got '{s}'"))
}

pub fn parse_range_usize(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = split_range(s)?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad range start in '{s}'"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad range end in '{s}'"))?;
    Ok((a, b))
}

pub fn parse_range_f64(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = split_range(s)?;
    let a: f64 = a.trim().parse().map_err(|_| format!("bad range start in '{s}'"))?;
    let b: f64 = b.trim().parse().map_err(|_| format!("bad range end in '{s}'"))?;
    Ok((a, b))
}

/// Folds command-line overrides into the scenario.
pub fn effective_config(cli: &Cli) -> Result<ScenarioConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.domain {
        match d {
            DomainArg::Ball => {
                cfg.domain.kind = DomainKind::Ball;
                let [a, b, c] = cfg.domain.semi_axes;
                if a != b || a != c {
                    cfg.domain.semi_axes = [1.0; 3];
                }
            }
            DomainArg::Ellipsoid => cfg.domain.kind = DomainKind::Ellipsoid,
        }
    }
    let r = &mut cfg.run;
    let point = |r: &mut RunParams, p: &PointArgs| {
        if let Some(x) = p.x {
            r.x = x;
        }
        if let Some(v) = p.v {
            r.v = v;
        }
    };
    match &cli.command {
        Command::Trace { point: p } => point(r, p),
        Command::Cycles { bc, t, point: p } => {
            point(r, p);
            if let Some(t) = t {
                r.t_end = *t;
            }
            if let Some(b) = bc {
                cfg.bc.kind = (*b).into();
            }
        }
        Command::Jacobian { k, eps0, setup } => {
            if let Some(k) = k {
                r.jacobian_k = *k;
            }
            if let Some(e) = eps0 {
                r.eps0 = *e;
            }
            if let Some(s) = setup {
                r.jacobian_setup = match s {
                    SetupArg::NearTangent => JacobianSetup::NearTangent,
                    SetupArg::Normal => JacobianSetup::NormalIncidence,
                };
            }
        }
        Command::KernelCheck => {}
        Command::StuckMass { k, t, paths, point: p } => {
            point(r, p);
            if let Some((a, b)) = k {
                r.k_min = *a;
                r.k_max = *b;
            }
            if let Some(t) = t {
                r.t_end = *t;
            }
            if let Some(n) = paths {
                r.paths = *n;
            }
        }
        Command::Decay { bc, t } => {
            if let Some((a, b)) = t {
                r.t_start = *a;
                r.t_end = *b;
            }
            if let Some(b) = bc {
                cfg.bc.kind = (*b).into();
            }
        }
        Command::Solve { bc, t, mode } => {
            if let Some(t) = t {
                r.t_end = *t;
            }
            if let Some(m) = mode {
                r.solve_mode = *m;
            }
            if let Some(b) = bc {
                cfg.bc.kind = (*b).into();
            }
        }
        Command::Coercivity { bc } => {
            if let Some(b) = bc {
                cfg.bc.kind = (*b).into();
            }
        }
    }
    if let Some(d) = &cli.out {
        cfg.output.dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

/// Rows, a summary and the named checks of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportBundle {
    pub provenance: Provenance,
    pub summary: BTreeMap<String, Value>,
    pub checks: Vec<CheckOutcome>,
    pub rows: Vec<Value>,
}

impl ReportBundle {
    fn new(command: &str, cfg: &ScenarioConfig) -> Self {
        Self {
            provenance: Provenance {
                command: command.to_string(),
                config_hash: cfg.hash(),
                seed: cfg.seed,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
            },
            summary: BTreeMap::new(),
            checks: Vec::new(),
            rows: Vec::new(),
        }
    }

    fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary
            .insert(key.to_string(), serde_json::to_value(value).expect("summary value serializes"));
    }

    fn check(&mut self, name: &str, value: f64, limit: f64, pass: bool) {
        self.checks.push(CheckOutcome {
            name: name.to_string(),
            value,
            limit,
            pass,
        });
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect()
    }
}

/// Writes floats with 17 significant digits.
struct Sig17;

impl serde_json::ser::Formatter for Sig17 {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

pub fn to_json(bundle: &ReportBundle) -> Vec<u8> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Sig17);
    bundle.serialize(&mut ser).expect("report serializes");
    out.push(b'\n');
    out
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                flatten(&key(k), x, out);
            }
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&key(&i.to_string()), x, out);
            }
        }
        Value::Number(n) => {
            let s = match n.as_f64() {
                Some(f) if !(n.is_i64() || n.is_u64()) => format!("{f:.16e}"),
                _ => n.to_string(),
            };
            out.insert(prefix.to_string(), s);
        }
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        Value::Bool(b) => {
            out.insert(prefix.to_string(), b.to_string());
        }
        Value::Null => {
            out.insert(prefix.to_string(), String::new());
        }
    }
}

/// Rows flattened to dotted column names, columns sorted.
pub fn to_csv(bundle: &ReportBundle) -> Vec<u8> {
    let flat: Vec<BTreeMap<String, String>> = bundle
        .rows
        .iter()
        .map(|r| {
            let mut m = BTreeMap::new();
            flatten("", r, &mut m);
            m
        })
        .collect();
    let mut columns: Vec<String> = flat.iter().flat_map(|m| m.keys().cloned()).collect();
    columns.sort();
    columns.dedup();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&columns).expect("csv header");
    for m in &flat {
        w.write_record(columns.iter().map(|c| m.get(c).map(String::as_str).unwrap_or("")))
            .expect("csv row");
    }
    w.into_inner().expect("csv flush")
}

pub fn to_text(bundle: &ReportBundle) -> Vec<u8> {
    let mut s = String::new();
    let p = &bundle.provenance;
    s.push_str(&format!(
        "{} (version {}, seed {}, config {})\n",
        p.command, p.code_version, p.seed, p.config_hash
    ));
    for (k, v) in &bundle.summary {
        s.push_str(&format!("  {k}: {v}\n"));
    }
    for c in &bundle.checks {
        s.push_str(&format!(
            "  [{}] {}: {:.6e} (limit {:.6e})\n",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.limit
        ));
    }
    let csv = String::from_utf8(to_csv(bundle)).expect("csv is utf-8");
    for line in csv.lines() {
        s.push_str("  ");
        s.push_str(&line.replace(',', "\t"));
        s.push('\n');
    }
    s.into_bytes()
}

pub fn render(bundle: &ReportBundle, format: Format) -> Vec<u8> {
    match format {
        Format::Json => to_json(bundle),
        Format::Csv => to_csv(bundle),
        Format::Text => to_text(bundle),
    }
}

/// Writes the report into `dir` (or stdout) and returns the path used.
pub fn emit_report(bundle: &ReportBundle, format: Format, dir: Option<&Path>) -> Result<Option<PathBuf>, CliError> {
    let bytes = render(bundle, format);
    match dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            let path = d.join(format!("{}.{}", bundle.provenance.command, format.extension()));
            fs::write(&path, bytes)?;
            Ok(Some(path))
        }
        None => {
            io::stdout().write_all(&bytes)?;
            Ok(None)
        }
    }
}

fn phase_point(cfg: &ScenarioConfig) -> PhasePoint {
    PhasePoint::new(Vec3::from(cfg.run.x), Vec3::from(cfg.run.v))
}

fn vec_json(v: &Vec3) -> Value {
    json!([v[0], v[1], v[2]])
}

fn run_trace(cfg: &ScenarioConfig, domain: &LevelSetDomain, b: &mut ReportBundle) -> Result<(), CliError> {
    let p = phase_point(cfg);
    let rec = backward_exit(domain, &p)?;
    let t_f = forward_exit(domain, &p)?;
    let mut row = json!({
        "t_b": rec.t_b,
        "x_b": vec_json(&rec.x_b),
        "normal": vec_json(&rec.normal),
        "v_dot_n": rec.dot,
        "grazing": rec.grazing,
        "t_forward": t_f,
    });
    if !rec.grazing {
        let g = exit_gradients(domain, &p)?;
        row["grad_x_tb"] = vec_json(&g.grad_x_tb);
        row["grad_v_tb"] = vec_json(&g.grad_v_tb);
        let m = |a: &nalgebra::Matrix3<f64>| json!((0..3).map(|i| (0..3).map(|j| a[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>());
        row["grad_x_xb"] = m(&g.grad_x_xb);
        row["grad_v_xb"] = m(&g.grad_v_xb);
    }
    b.rows.push(row);
    Ok(())
}

fn run_cycles(cfg: &ScenarioConfig, domain: &LevelSetDomain, b: &mut ReportBundle) -> Result<(), CliError> {
    let p = phase_point(cfg);
    let t = cfg.run.t_end;
    let mb = cfg.run.max_bounces;
    let cycle = match cfg.bc.kind {
        BcKind::BounceBack => bounce_back_cycle(domain, t, &p, 0.0, mb)?,
        BcKind::Specular => specular_cycle(domain, t, &p, 0.0, mb)?,
        BcKind::Diffuse => {
            let mut s = DiffuseSampler::new(cfg.seed, 0);
            diffuse_cycle_sample(domain, t, &p, 0.0, mb, &mut s)?
        }
        BcKind::Inflow => {
            return Err(CliError::ConfigInvalid("cycles need a reflecting wall (bounceback, specular, diffuse)".into()))
        }
    };
    b.note("termination", cycle.termination);
    b.note("bounces", cycle.bounces());
    for (k, n) in cycle.nodes.iter().enumerate() {
        b.rows.push(json!({"k": k, "t": n.t, "x": vec_json(&n.x), "v": vec_json(&n.v)}));
    }
    Ok(())
}

fn run_jacobian(cfg: &ScenarioConfig, domain: &LevelSetDomain, b: &mut ReportBundle) -> Result<(), CliError> {
    let x1 = domain.project_from_witness(&Vector3::x())?;
    let r = specular_jacobian_fd_with(domain, &x1, cfg.run.eps0, cfg.run.jacobian_k, cfg.run.jacobian_setup)?;
    b.note("x1", vec_json(&x1));
    b.rows.push(serde_json::to_value(r).expect("report serializes"));
    b.check("relative gap to predicted determinant", r.rel_gap, cfg.run.jacobian_tol, r.rel_gap <= cfg.run.jacobian_tol);
    Ok(())
}

fn run_kernel_check(cfg: &ScenarioConfig, b: &mut ReportBundle) -> Result<(), CliError> {
    let params = cfg.weight;
    let flux = flux_measure(&params, &Vector3::z())?;
    let mass_err = (flux.total_mass - 1.0).abs();
    b.rows.push(json!({"quantity": "flux total mass", "value": flux.total_mass}));
    b.rows.push(json!({"quantity": "c_mu", "value": flux.c_mu}));
    b.rows.push(json!({"quantity": "wtilde^2 flux integral", "value": flux.wtilde_sq_integral}));
    b.check("flux measure total mass", mass_err, 1e-8, mass_err <= 1e-8);

    let kw = kw_bound_check(&params, &cfg.run.kw_speeds, cfg.run.kw_epsilon);
    b.note("kw_discriminant", kw.form.discriminant);
    b.note("kw_negative_definite", kw.form.negative_definite);
    for (s, prod) in &kw.products {
        b.rows.push(json!({"quantity": "(1+|v|) kw integral", "speed": s, "value": prod}));
    }
    match kw.refinement_gap {
        Some(g) => b.check("weighted kernel bound refinement gap", g, 0.02, kw.ok),
        None => b.check("weighted kernel exponent negative definite", kw.form.discriminant, 0.0, false),
    }

    let kcfg = cfg.kernel_config();
    let grid = VelocityGrid::new(cfg.run.velocity_max, cfg.run.velocity_nodes)?;
    let ns = null_space_check(&kcfg, &grid)?;
    b.note("quadrature_spec", kcfg);
    b.note("null_space_nodes_checked", ns.nodes_checked);
    for (label, e) in ns.labels.iter().zip(&ns.rel_errors) {
        b.rows.push(json!({"quantity": format!("null space K-nu for {label}"), "value": e}));
        let tol = cfg.run.null_space_tol;
        b.check(&format!("collision invariant {label}"), *e, tol, *e <= tol);
    }
    Ok(())
}

fn run_stuck_mass(cfg: &ScenarioConfig, domain: &LevelSetDomain, b: &mut ReportBundle) -> Result<(), CliError> {
    let p = phase_point(cfg);
    let r = &cfg.run;
    let sweep = stuck_fraction_sweep(domain, r.t_end, &p, r.k_max, r.paths, &DiffuseSampler::new(cfg.seed, 0))?;
    let rows: Vec<_> = sweep.iter().filter(|e| e.k >= r.k_min).collect();
    let mut worst_rise: f64 = f64::NEG_INFINITY;
    for w in rows.windows(2) {
        let sigma = (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
        worst_rise = worst_rise.max(w[1].fraction - w[0].fraction - 3.0 * sigma);
    }
    for e in &rows {
        b.rows.push(json!({"k": e.k, "fraction": e.fraction, "stderr": e.stderr}));
    }
    let k0 = rows.iter().find(|e| e.fraction < 0.05).map(|e| e.k);
    b.note("k0_below_0.05", k0);
    b.note("t", r.t_end);
    if rows.len() >= 2 {
        b.check("monotone within 3 sigma", worst_rise, 0.0, worst_rise <= 0.0);
    }
    Ok(())
}

fn sample_points(cfg: &ScenarioConfig, domain: &LevelSetDomain) -> Vec<PhasePoint> {
    let mut rng = rng::stream(cfg.seed, 1);
    (0..cfg.run.sample_points)
        .map(|_| {
            let x = domain.sample_interior(&mut rng);
            let v = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            PhasePoint::new(x, v)
        })
        .collect()
}

fn time_samples(r: &RunParams) -> Vec<f64> {
    let n = r.t_samples;
    (0..n)
        .map(|i| r.t_start + (r.t_end - r.t_start) * i as f64 / (n - 1) as f64)
        .collect()
}

fn run_decay(cfg: &ScenarioConfig, domain: &LevelSetDomain, b: &mut ReportBundle) -> Result<(), CliError> {
    use rayon::prelude::*;
    let kcfg = cfg.kernel_config();
    let nu = NuProfile::new(&kcfg)?;
    let grid = VelocityGrid::new(cfg.run.velocity_max, cfg.run.velocity_nodes)?;
    let nu0 = nu.nu0(&grid);
    let params = cfg.weight;
    let center = domain.bounding_center();
    let (kind, amp) = (cfg.run.initial, cfg.run.amplitude);
    let h0 = move |x: &Vec3, v: &Vec3| amp * kind.eval(&params, &center, x, v);
    let bc = cfg.bc.to_spec();
    let problem = TransportProblem {
        domain,
        bc: &bc,
        nu: &nu,
        params,
        h0: &h0,
        h0_wtilde_sup: amp.abs() * kind.wtilde_sup(&params, domain.bounding_radius()),
        max_bounces: cfg.run.max_bounces,
    };
    let points = sample_points(cfg, domain);
    let times = time_samples(&cfg.run);
    let mut norms = Vec::with_capacity(times.len());
    let mut remainders = Vec::with_capacity(times.len());
    let mut stderrs = Vec::with_capacity(times.len());
    for (ti, &t) in times.iter().enumerate() {
        let vals: Vec<Result<_, SemigroupError>> = points
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut s = DiffuseSampler::new(cfg.seed, rng::substream(ti as u64 + 2, i as u64));
                problem.eval(t, p, &mut s)
            })
            .collect();
        let (mut norm, mut rem, mut se) = (0.0f64, 0.0f64, 0.0f64);
        for v in vals {
            let v = v?;
            norm = norm.max(v.value.abs());
            rem = rem.max(v.remainder_bound);
            se = se.max(v.stderr);
        }
        norms.push(norm);
        remainders.push(rem);
        stderrs.push(se);
        b.rows.push(json!({"t": t, "norm": norm, "remainder_bound": rem, "max_stderr": se}));
    }
    let fit = decay_fit(&times, &norms)?;
    b.note("times", &times);
    b.note("norms", &norms);
    b.note("lambda_hat", fit.lambda_hat);
    b.note("residual", fit.fit_residual);
    b.note("remainder_bounds", &remainders);
    b.note("nu0", nu0);
    b.note("quadrature_spec", kcfg);
    b.note("bc", cfg.bc.kind);
    let target = if cfg.bc.kind == BcKind::Diffuse { nu0 / 2.0 } else { nu0 };
    let limit = target - cfg.run.check_tol;
    b.check("fitted rate at least nu0 (nu0/2 for diffuse) minus tolerance", fit.lambda_hat, limit, fit.lambda_hat >= limit);
    Ok(())
}

struct Desk {
    kcfg: KernelConfig,
    nu: NuProfile,
    phase: PhaseGrid,
    kernel: KernelMatrix,
}

fn desk(cfg: &ScenarioConfig, domain: &LevelSetDomain) -> Result<Desk, CliError> {
    // fail before the expensive kernel assembly
    if cfg.bc.kind == BcKind::Diffuse {
        return Err(CliError::ConfigInvalid("diffuse walls are not supported by the Duhamel solver".into()));
    }
    let kcfg = cfg.kernel_config();
    let nu = NuProfile::new(&kcfg)?;
    let grid = VelocityGrid::new(cfg.run.velocity_max, cfg.run.velocity_nodes)?;
    let mut kernel = KernelMatrix::assemble(&kcfg, &grid, &nu)?;
    kernel.make_conservative(&grid);
    let phase = PhaseGrid {
        cells: SpatialCells::new(domain, cfg.run.cell_size)?,
        velocities: grid,
    };
    Ok(Desk {
        kcfg,
        nu,
        phase,
        kernel,
    })
}

/// Axis `e₃` through the centre when the domain is symmetric about it.
fn axis_of(domain: &LevelSetDomain) -> Option<SymmetryAxis> {
    let (c, a) = domain.semi_axes()?;
    (a[0] == a[1]).then(|| SymmetryAxis::new(c, Vector3::z()).expect("e3 is non-zero"))
}

fn run_solve(cfg: &ScenarioConfig, domain: &LevelSetDomain, b: &mut ReportBundle) -> Result<(), CliError> {
    let r = &cfg.run;
    if r.t_start != 0.0 {
        return Err(CliError::ConfigInvalid("solve runs from t = 0".into()));
    }
    let d = desk(cfg, domain)?;
    let time = TimeGrid::new(r.t_end, r.time_nodes, r.panel_nodes)?;
    let bc = cfg.bc.to_spec();
    let params = cfg.weight;
    let setup = SolverSetup::new(domain, &bc, params, &d.phase, &d.kernel, &time, r.max_bounces)?;
    let center = domain.bounding_center();
    let (kind, amp) = (r.initial, r.amplitude);
    let h0 = move |x: &Vec3, v: &Vec3| amp * kind.eval(&params, &center, x, v);
    b.note("mode", r.solve_mode);
    b.note("bc", cfg.bc.kind);
    b.note("quadrature_spec", d.kcfg);
    b.note("nu0", d.nu.nu0(&d.phase.velocities));
    b.note("phase_points", d.phase.len());
    match r.solve_mode {
        SolveMode::Linear => {
            let res = setup.duhamel(&h0, r.picard_iters, r.picard_tol, None)?;
            b.note("picard_diffs", &res.diffs);
            b.note("converged", res.converged);
            let axis = axis_of(domain);
            let init = FieldSample {
                time: 0.0,
                mode: WeightMode::WeightedH,
                values: d.phase.sample(&h0),
            };
            let m0 = moments(&d.phase, &params, &init, axis.as_ref());
            let mut norms = Vec::new();
            for f in &res.fields {
                let m = moments(&d.phase, &params, f, axis.as_ref());
                let sup = f.sup_norm();
                norms.push(sup);
                b.rows.push(json!({
                    "t": f.time, "sup_norm": sup,
                    "mass": m.mass, "energy": m.energy, "angular": m.angular,
                    "mass_drift": (m.mass - m0.mass).abs(), "energy_drift": (m.energy - m0.energy).abs(),
                }));
            }
            if let Ok(fit) = decay_fit(&res.times, &norms) {
                b.note("lambda_hat", fit.lambda_hat);
                b.note("residual", fit.fit_residual);
            }
        }
        SolveMode::Nonlinear => {
            let gamma = GammaForm::assemble(&d.kcfg, &d.phase.velocities)?;
            let res = setup.nonlinear(&gamma, &h0, r.m_steps, r.picard_iters)?;
            b.note("iterate_diffs", &res.diffs);
            b.note("contraction", res.contraction);
            if let Some(c) = res.contraction {
                // 0/0 after exact convergence counts as contracting
                b.check("iterates contract", c, 1.0, !(c >= 1.0));
            }
            for f in &res.result.fields {
                b.rows.push(json!({"t": f.time, "sup_norm": f.sup_norm()}));
            }
        }
        SolveMode::Positivity => {
            let gain = GainForm::assemble(&d.kcfg, &d.phase.velocities)?;
            let big_f0 = move |x: &Vec3, v: &Vec3| maxwellian(v) + amp * sqrt_maxwellian(v) * kind.eval(&params, &center, x, v);
            let res = setup.positivity(&gain, &big_f0, r.m_steps)?;
            b.note("min_value", res.min_value);
            b.note("max_deviation_from_maxwellian", res.max_deviation_from_maxwellian);
            for (m, v) in res.minima.iter().enumerate() {
                b.rows.push(json!({"iterate": m + 1, "min_value": v}));
            }
        }
    }
    Ok(())
}

fn run_coercivity(cfg: &ScenarioConfig, domain: &LevelSetDomain, b: &mut ReportBundle) -> Result<(), CliError> {
    let r = &cfg.run;
    let d = desk(cfg, domain)?;
    let time = TimeGrid::new(1.0, r.time_nodes, r.panel_nodes)?;
    let bc = cfg.bc.to_spec();
    let params = cfg.weight;
    let setup = SolverSetup::new(domain, &bc, params, &d.phase, &d.kernel, &time, r.max_bounces)?;
    let center = domain.bounding_center();
    let (kind, amp) = (r.initial, r.amplitude);
    let h0 = move |x: &Vec3, v: &Vec3| amp * kind.eval(&params, &center, x, v);
    let res = setup.duhamel(&h0, r.picard_iters, r.picard_tol, None)?;
    let snaps: Vec<(f64, &FieldSample)> = time.node_weights.iter().copied().zip(&res.fields).collect();
    let c = coercivity_ratio(domain, &d.phase, &params, &d.nu, &snaps, cfg.bc.kind)?;
    b.note("ratio", c.ratio);
    b.note("bc", cfg.bc.kind);
    b.note("picard_diffs", &res.diffs);
    b.rows.push(serde_json::to_value(c).expect("report serializes"));
    Ok(())
}

/// Runs one subcommand on a validated configuration.
pub fn run_scenario(cfg: &ScenarioConfig, command: &Command) -> Result<ReportBundle, CliError> {
    let domain = cfg.domain.build()?;
    let mut b = ReportBundle::new(command.name(), cfg);
    match command {
        Command::Trace { .. } => run_trace(cfg, &domain, &mut b)?,
        Command::Cycles { .. } => run_cycles(cfg, &domain, &mut b)?,
        Command::Jacobian { .. } => run_jacobian(cfg, &domain, &mut b)?,
        Command::KernelCheck => run_kernel_check(cfg, &mut b)?,
        Command::StuckMass { .. } => run_stuck_mass(cfg, &domain, &mut b)?,
        Command::Decay { .. } => run_decay(cfg, &domain, &mut b)?,
        Command::Solve { .. } => run_solve(cfg, &domain, &mut b)?,
        Command::Coercivity { .. } => run_coercivity(cfg, &domain, &mut b)?,
    }
    Ok(b)
}

/// Parses, runs and writes; returns the process exit code.
pub fn main_with(cli: Cli) -> u8 {
    let outcome = (|| -> Result<ReportBundle, CliError> {
        let cfg = effective_config(&cli)?;
        if let Some(n) = cli.threads {
            // a pool that already exists keeps its size
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        let bundle = run_scenario(&cfg, &cli.command)?;
        emit_report(&bundle, cli.format, cfg.output.dir.as_deref())?;
        Ok(bundle)
    })();
    match outcome {
        Ok(bundle) => {
            let failed = bundle.failed_checks();
            if failed.is_empty() {
                EXIT_OK
            } else {
                for f in failed {
                    eprintln!("check failed: {f}");
                }
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> ReportBundle {
        let cfg = ScenarioConfig::default();
        let mut b = ReportBundle::new("trace", &cfg);
        b.rows.push(json!({"t": 0.1, "x": [1.0, 2.5, -3.0], "ok": true}));
        b.rows.push(json!({"t": 1.0 / 3.0, "x": [0.0, 0.0, 0.0], "ok": false}));
        b
    }

    #[test]
    fn json_round_trip_preserves_values() {
        let b = bundle();
        let text = to_json(&b);
        let back: Value = serde_json::from_slice(&text).unwrap();
        assert_eq!(back["rows"][1]["t"].as_f64().unwrap(), 1.0 / 3.0);
        assert_eq!(back["rows"][0]["x"][1].as_f64().unwrap(), 2.5);
        assert_eq!(back["provenance"]["config_hash"], json!(b.provenance.config_hash));
        // 17 significant digits
        assert!(String::from_utf8(text).unwrap().contains("3.3333333333333331e-1"));
    }

    #[test]
    fn csv_header_is_sorted_flattened_columns() {
        let text = String::from_utf8(to_csv(&bundle())).unwrap();
        assert_eq!(text.lines().next().unwrap(), "ok,t,x.0,x.1,x.2");
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn config_hash_tracks_changes() {
        let a = ScenarioConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.run.t_end = 3.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation_rejects_bad_weights_and_custom_domains() {
        let mut c = ScenarioConfig::default();
        c.weight.theta = 0.25;
        assert!(matches!(c.validate(), Err(CliError::ConfigInvalid(_))));
        let mut c = ScenarioConfig::default();
        c.domain.kind = DomainKind::Custom;
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::default();
        c.kernel.gamma = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_and_json_configs_agree() {
        let toml_text = "seed = 7\n[domain]\ntype = \"ellipsoid\"\nsemi_axes = [1.0, 1.0, 0.5]\n[bc]\nkind = \"specular\"\n[run]\nt_end = 1.5\n";
        let json_text = r#"{"seed":7,"domain":{"type":"ellipsoid","semi_axes":[1.0,1.0,0.5]},"bc":{"kind":"specular"},"run":{"t_end":1.5}}"#;
        let a = ScenarioConfig::parse(toml_text, false).unwrap();
        let b = ScenarioConfig::parse(json_text, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.bc.kind, BcKind::Specular);
        assert!(ScenarioConfig::parse("[run]\nbogus = 1\n", false).is_err());
    }

    #[test]
    fn ranges_and_vectors_parse() {
        assert_eq!(parse_range_usize("2..30").unwrap(), (2, 30));
        assert_eq!(parse_range_f64("0..2").unwrap(), (0.0, 2.0));
        assert_eq!(parse_vec3("0.1,-2,3").unwrap(), [0.1, -2.0, 3.0]);
        assert!(parse_vec3("1,2").is_err());
    }

    #[test]
    fn wtilde_sup_detects_unbounded_data() {
        let p = WeightParams::default();
        assert!(InitialKind::Constant.wtilde_sup(&p, 1.0).is_infinite());
        let g = InitialKind::Gaussian.wtilde_sup(&p, 1.0);
        assert!(g.is_finite() && g >= 1.0);
    }
}
