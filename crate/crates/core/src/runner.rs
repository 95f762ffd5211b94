//! Config-driven experiments: one subcommand, one output directory, a
//! manifest of content hashes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::algebra::StratifiedAlgebra;
use crate::drift::{DriftSpec, ScalarExpr};
use crate::feynman_kac::{self, FkRun, Source, TerminalProblem};
use crate::fmt_f64;
use crate::fp::{self, InitialDatum};
use crate::frame::HorizontalFrame;
use crate::grid::{DensityField, Grid};
use crate::measures::{self, EmpiricalMeasure, FmOptions, FmProblem, HolderCurvePlan};
use crate::poly::SparsePolynomial;
use crate::sde::{self, ItoSystem, SimulationPlan};

/// Failure of an experiment, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{module}: {message}")]
    Runtime { module: &'static str, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config { .. } => 2,
            RunError::Runtime { .. } => 1,
        }
    }
}

fn config_err(path: &str, message: impl Into<String>) -> RunError {
    RunError::Config { path: path.into(), message: message.into() }
}

fn runtime(module: &'static str) -> impl Fn(String) -> RunError {
    move |message| RunError::Runtime { module, message }
}

macro_rules! rt {
    ($module:literal, $e:expr) => {
        $e.map_err(|e| RunError::Runtime { module: $module, message: e.to_string() })
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GroupCheck,
    Simulate,
    FpSolve,
    FmDist,
    HolderCurve,
    FeynmanKac,
    CompareDuality,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::GroupCheck,
        Command::Simulate,
        Command::FpSolve,
        Command::FmDist,
        Command::HolderCurve,
        Command::FeynmanKac,
        Command::CompareDuality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GroupCheck => "group-check",
            Command::Simulate => "simulate",
            Command::FpSolve => "fp-solve",
            Command::FmDist => "fm-dist",
            Command::HolderCurve => "holder-curve",
            Command::FeynmanKac => "feynman-kac",
            Command::CompareDuality => "compare-duality",
        }
    }
}

impl std::str::FromStr for Command {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Command::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| format!("unknown command `{s}`"))
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    /// Starting point of the paths and center of the mollified Dirac.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    /// Mollifier scale for grid solves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// Normalized indicator of a box, for grid solves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plateau: Option<Plateau>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plateau {
    pub center: Vec<f64>,
    pub radii: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    pub cells: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeWindow {
    pub s: f64,
    pub t: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice_times: Option<Vec<f64>>,
    /// Order `p` of `E[sup ‖ξ‖^p]` to report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sup_moment: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpOptions {
    /// Defaults to 0.9 × the stability bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_times: Option<Vec<f64>>,
    #[serde(default)]
    pub format: DensityFormat,
    /// Axes kept in an extra marginal snapshot per output time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginal: Option<Vec<usize>>,
}

/// Where the atoms of one side of a distance come from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AtomSource {
    /// CSV with header `x_1..x_d` and an optional trailing `weight` column.
    File(PathBuf),
    /// Monte Carlo law at this time, from the configured initial point.
    LawAt(f64),
    Dirac(Vec<f64>),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<AtomSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<AtomSource>,
    /// Write the atoms, weights and distance matrix.
    #[serde(default)]
    pub dump: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolderOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub increments: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_eq: Option<f64>,
    /// Defaults to `1 + sup|β|`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_st: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Expr(ScalarExpr),
    /// Polynomial in `x1..xd` and `s`.
    Poly(String),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FkConfig {
    /// Terminal payoff, polynomial in `x1..xd`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<ScalarExpr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<SourceConfig>,
    /// Exact solution `u(s, x)`; sets `ψ = u(t, ·)` and the matching source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manufactured: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualityOptions {
    /// KDE bandwidth; defaults to the `c·n^{−1/(Q+2)}` rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    /// Coarse cells for the grid `d₀`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d0_threshold: Option<f64>,
}

/// Every input of one experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub group: GroupConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<TimeWindow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub simulate: SimulateOptions,
    #[serde(default)]
    pub fp: FpOptions,
    #[serde(default)]
    pub fm: FmConfig,
    #[serde(default)]
    pub holder: HolderOptions,
    #[serde(default)]
    pub feynman_kac: FkConfig,
    #[serde(default)]
    pub duality: DualityOptions,
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, RunError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_err(if path.is_empty() { "." } else { &path }, e.into_inner().to_string())
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(".", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Flags that override or complement the config.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub quiet: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub dir: PathBuf,
    pub artifacts: Vec<Artifact>,
    pub summary: String,
    /// Numbers of interest for callers driving the runner in-process.
    pub values: serde_json::Value,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    command: &'static str,
    config: &'a ExperimentConfig,
    artifacts: &'a [Artifact],
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), RunError> {
        let p = self.path(name);
        rt!("runner", std::fs::write(p, body))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunError> {
        let mut s = rt!("runner", serde_json::to_string_pretty(value))?;
        s.push('\n');
        self.text(name, &s)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs one experiment and writes its artifacts, `summary.txt` and `manifest.json`.
pub fn run_experiment(command: Command, config: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport, RunError> {
    let mut config = config.clone();
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    let dir = opts
        .out
        .clone()
        .or_else(|| config.output.clone())
        .ok_or_else(|| config_err("output", "no output directory: pass --out or set `output`"))?;
    if let Some(0) = opts.workers {
        return Err(config_err("--workers", "worker count must be at least 1"));
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(k) = opts.workers {
        pool = pool.num_threads(k);
    }
    let pool = rt!("runner", pool.build())?;
    rt!("runner", std::fs::create_dir_all(&dir))?;
    let mut out = Outputs { dir: dir.clone(), files: Vec::new() };
    let ctx = Context::new(&config)?;
    let (summary, values) = pool.install(|| match command {
        Command::GroupCheck => group_check(&ctx, &mut out),
        Command::Simulate => simulate(&ctx, &mut out),
        Command::FpSolve => fp_solve(&ctx, &mut out),
        Command::FmDist => fm_dist(&ctx, &mut out),
        Command::HolderCurve => holder_curve(&ctx, &mut out),
        Command::FeynmanKac => feynman_kac(&ctx, &mut out),
        Command::CompareDuality => compare_duality(&ctx, &mut out),
    })?;
    let header = format!("{} (subelliptic {})\n", command.name(), env!("CARGO_PKG_VERSION"));
    let summary = header + &summary;
    out.text("summary.txt", &summary)?;
    let mut artifacts = Vec::new();
    for f in &out.files {
        let bytes = rt!("runner", std::fs::read(dir.join(f)))?;
        artifacts.push(Artifact { file: f.clone(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
    }
    let manifest = Manifest { version: env!("CARGO_PKG_VERSION"), command: command.name(), config: &config, artifacts: &artifacts };
    let mut m = rt!("runner", serde_json::to_string_pretty(&manifest))?;
    m.push('\n');
    rt!("runner", std::fs::write(dir.join("manifest.json"), m))?;
    if !opts.quiet {
        print!("{summary}");
    }
    Ok(RunReport { dir, artifacts, summary, values })
}

/// Validated pieces shared by the subcommands.
struct Context<'a> {
    config: &'a ExperimentConfig,
    algebra: Arc<StratifiedAlgebra>,
    frame: HorizontalFrame,
    drift: DriftSpec,
}

fn positive(path: &str, v: f64) -> Result<f64, RunError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(config_err(path, format!("must be positive, got {v}")))
    }
}

impl<'a> Context<'a> {
    fn new(config: &'a ExperimentConfig) -> Result<Self, RunError> {
        let g = &config.group;
        let algebra = match (&g.preset, &g.file) {
            (Some(name), None) => StratifiedAlgebra::preset(name, g.dim).map_err(|e| config_err("group.preset", e.to_string()))?,
            (None, Some(file)) => {
                if g.dim.is_some() {
                    return Err(config_err("group.dim", "only valid with a preset"));
                }
                StratifiedAlgebra::from_path(file).map_err(|e| config_err("group.file", e.to_string()))?
            }
            _ => return Err(config_err("group", "set exactly one of `preset` and `file`")),
        };
        let algebra = Arc::new(algebra);
        let frame = HorizontalFrame::derive(algebra.clone());
        let drift = config.drift.clone().unwrap_or_else(|| DriftSpec::zero(frame.len()));
        drift.validate_shape(frame.len(), frame.dim()).map_err(|e| config_err("drift", e.to_string()))?;
        for (i, c) in drift.components.iter().enumerate() {
            c.validate(frame.dim()).map_err(|e| config_err(&format!("drift.components[{i}]"), e.to_string()))?;
        }
        if let Some(dt) = config.dt {
            positive("dt", dt)?;
        }
        if config.paths == Some(0) {
            return Err(config_err("paths", "must be positive"));
        }
        if let Some(w) = config.time {
            if !(w.s.is_finite() && w.t.is_finite() && w.s < w.t) {
                return Err(config_err("time", "need finite s < t"));
            }
        }
        Ok(Self { config, algebra, frame, drift })
    }

    fn d(&self) -> usize {
        self.algebra.dim()
    }

    fn system(&self) -> Result<ItoSystem, RunError> {
        rt!("sde_sim", sde::strat_to_ito(&self.frame, &self.drift))
    }

    fn time(&self) -> Result<TimeWindow, RunError> {
        self.config.time.ok_or_else(|| config_err("time", "required by this command"))
    }

    fn dt(&self) -> Result<f64, RunError> {
        self.config.dt.ok_or_else(|| config_err("dt", "required by this command"))
    }

    fn paths(&self) -> Result<usize, RunError> {
        self.config.paths.ok_or_else(|| config_err("paths", "required by this command"))
    }

    fn point(&self) -> Result<Vec<f64>, RunError> {
        let p = self
            .config
            .initial
            .as_ref()
            .and_then(|i| i.point.clone())
            .ok_or_else(|| config_err("initial.point", "required by this command"))?;
        if p.len() != self.d() || p.iter().any(|v| !v.is_finite()) {
            return Err(config_err("initial.point", format!("need {} finite coordinates", self.d())));
        }
        Ok(p)
    }

    fn eps(&self) -> Result<f64, RunError> {
        let e = self.config.initial.as_ref().and_then(|i| i.eps).unwrap_or(0.05);
        positive("initial.eps", e)
    }

    fn grid(&self) -> Result<Grid, RunError> {
        let g = self.config.grid.as_ref().ok_or_else(|| config_err("grid", "required by this command"))?;
        let d = self.d();
        if g.cells.len() != d {
            return Err(config_err("grid.cells", format!("need {d} entries")));
        }
        let grid = match (&g.radii, &g.lower, &g.upper) {
            (Some(r), None, None) => {
                if r.len() != d {
                    return Err(config_err("grid.radii", format!("need {d} entries")));
                }
                for (k, v) in r.iter().enumerate() {
                    positive(&format!("grid.radii[{k}]"), *v)?;
                }
                Grid::centered(r, &g.cells)
            }
            (None, Some(lo), Some(hi)) => Grid::new(lo.clone(), hi.clone(), g.cells.clone()),
            _ => return Err(config_err("grid", "set either `radii` or both `lower` and `upper`")),
        };
        grid.map_err(|e| config_err("grid", e.to_string()))
    }

    /// Checks the declared drift bound on the grid box or a unit box.
    fn check_drift(&self, window: TimeWindow) -> Result<f64, RunError> {
        let (lo, hi) = match self.grid() {
            Ok(g) => (g.lower().to_vec(), g.upper().to_vec()),
            Err(_) => (vec![-4.0; self.d()], vec![4.0; self.d()]),
        };
        self.drift
            .check_bound((window.s, window.t), &lo, &hi, 2000, self.config.seed ^ 0xd21f)
            .map_err(|e| config_err("drift.bound", e.to_string()))
    }

    fn initial_datum(&self, grid: &Grid) -> Result<InitialDatum, RunError> {
        if let Some(p) = self.config.initial.as_ref().and_then(|i| i.plateau.as_ref()) {
            let d = self.d();
            if p.center.len() != d || p.radii.len() != d {
                return Err(config_err("initial.plateau", format!("center and radii need {d} entries")));
            }
            let field = DensityField::from_fn(grid.clone(), 0.0, |x| {
                let inside = (0..d).all(|k| (x[k] - p.center[k]).abs() <= p.radii[k]);
                if inside {
                    1.0
                } else {
                    0.0
                }
            });
            return rt!("fp_solver", InitialDatum::density(field));
        }
        let x = self.point()?;
        rt!("fp_solver", fp::mollified_dirac(&self.algebra, &x, self.eps()?, grid))
    }
}

type Outcome = Result<(String, serde_json::Value), RunError>;

#[derive(Serialize)]
struct FieldSummary {
    components: Vec<String>,
    homogeneous: bool,
    divergence_free: bool,
    adjoint_implied: bool,
    triangular: bool,
}

fn group_check(ctx: &Context, out: &mut Outputs) -> Outcome {
    let alg = &ctx.algebra;
    let d = alg.dim();
    let report = ctx.frame.verify();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.seed);
    let mut points = vec![vec![0.0; d]];
    points.extend((0..100).map(|_| (0..d).map(|_| rng.random_range(-2.0..=2.0)).collect::<Vec<f64>>()));
    let horm = rt!("lie_core", ctx.frame.check_hormander(&points, alg.step()))?;
    let fields: Vec<FieldSummary> = ctx
        .frame
        .fields()
        .iter()
        .zip(&report.fields)
        .map(|(f, c)| FieldSummary {
            components: f.components.iter().map(|p| p.to_string()).collect(),
            homogeneous: c.homogeneous,
            divergence_free: c.divergence_free,
            adjoint_implied: c.adjoint_implied,
            triangular: c.triangular,
        })
        .collect();
    let correction: Vec<String> = ctx.frame.ito_correction().iter().map(|p| p.to_string()).collect();
    let homogeneous = report.fields.iter().all(|c| c.homogeneous);
    let divergence_free = report.fields.iter().all(|c| c.divergence_free);
    let values = serde_json::json!({
        "name": alg.name(),
        "dim": d,
        "step": alg.step(),
        "layer_dims": alg.layer_dims(),
        "homogeneous_dimension": fmt_f64(alg.homogeneous_dimension_f64()),
        "fields": fields,
        "hormander": {
            "depth": horm.depth,
            "points": horm.points.len(),
            "min_rank": horm.min_rank(),
            "passes": horm.passes,
        },
        "homogeneous": homogeneous,
        "divergence_free": divergence_free,
        "ito_correction": correction,
    });
    out.json("group_check.json", &values)?;
    let pass = |b: bool| if b { "pass" } else { "FAIL" };
    let mut s = String::new();
    let _ = writeln!(s, "group {} (dim {d}, step {}, Q = {})", alg.name(), alg.step(), alg.homogeneous_dimension_f64());
    let _ = writeln!(s, "hormander rank {} of {d} over {} points: {}", horm.min_rank(), horm.points.len(), pass(horm.passes));
    let _ = writeln!(s, "homogeneity: {}", pass(homogeneous));
    let _ = writeln!(s, "divergence-free: {}", pass(divergence_free));
    let _ = writeln!(s, "ito correction: ({})", correction.join(", "));
    Ok((s, values))
}

fn simulate(ctx: &Context, out: &mut Outputs) -> Outcome {
    let w = ctx.time()?;
    ctx.check_drift(w)?;
    let sys = ctx.system()?;
    let x0 = ctx.point()?;
    let mut plan = SimulationPlan::new(x0.clone(), w.s, w.t, ctx.dt()?, ctx.paths()?, ctx.config.seed);
    if let Some(times) = &ctx.config.simulate.slice_times {
        plan = plan.at_times(times.clone());
    }
    let ens = rt!("sde_sim", sys.simulate(&plan))?;
    let d = ctx.d();
    let mut csv = String::from("path_id,time");
    for k in 1..=d {
        let _ = write!(csv, ",x_{k}");
    }
    csv.push('\n');
    for p in 0..ens.n {
        for (j, t) in ens.times.iter().enumerate() {
            let _ = write!(csv, "{p},{}", fmt_f64(*t));
            for v in ens.state(p, j) {
                let _ = write!(csv, ",{}", fmt_f64(*v));
            }
            csv.push('\n');
        }
    }
    out.text("ensemble.csv", &csv)?;
    let moment = match ctx.config.simulate.sup_moment {
        Some(p) => Some(rt!("sde_sim", ens.sup_moment(p))?),
        None => None,
    };
    let values = serde_json::json!({
        "x0": x0, "s": w.s, "t": w.t, "dt": plan.dt, "paths": plan.n, "seed": plan.seed,
        "slices": ens.times, "sup_moment": moment,
    });
    out.json("simulate.json", &values)?;
    let mut s = format!("{} paths, {} slices on [{}, {}] with dt = {}\n", ens.n, ens.times.len(), w.s, w.t, plan.dt);
    if let (Some(m), Some(p)) = (moment, ctx.config.simulate.sup_moment) {
        let _ = writeln!(s, "E[sup |xi|^{p}] = {} (95% CI {} .. {})", m.mean, m.ci_low, m.ci_high);
    }
    Ok((s, values))
}

struct FpRun {
    solution: fp::FpSolution,
    stable_dt: f64,
    dt: f64,
}

fn run_fp(ctx: &Context, grid: &Grid, w: TimeWindow, times: &[f64], dt: Option<f64>) -> Result<FpRun, RunError> {
    ctx.check_drift(w)?;
    let ops = rt!("fp_solver", fp::build_operators(&ctx.frame, grid, &ctx.drift))?;
    let datum = ctx.initial_datum(grid)?;
    let stable_dt = ops.stable_dt();
    let dt = match dt {
        Some(v) => positive("fp.dt", v)?,
        None => 0.9 * stable_dt,
    };
    let solution = fp::fp_solve(&ops, &datum, w.s, w.t, dt, times).map_err(|e| match e {
        fp::FpError::Unstable { .. } => config_err("fp.dt", e.to_string()),
        other => runtime("fp_solver")(other.to_string()),
    })?;
    Ok(FpRun { solution, stable_dt, dt })
}

fn fp_solve(ctx: &Context, out: &mut Outputs) -> Outcome {
    let w = ctx.time()?;
    let grid = ctx.grid()?;
    let fpo = &ctx.config.fp;
    let times = fpo.output_times.clone().unwrap_or_else(|| vec![w.t]);
    let run = run_fp(ctx, &grid, w, &times, fpo.dt)?;
    let sol = &run.solution;
    for (k, snap) in sol.snapshots.iter().enumerate() {
        match fpo.format {
            DensityFormat::Csv => {
                let p = out.path(&format!("density_{k:03}.csv"));
                rt!("fp_solver", snap.write_csv(&p))?;
            }
            DensityFormat::Binary => {
                let p = out.path(&format!("density_{k:03}.bin"));
                out.files.push(format!("density_{k:03}.bin.json"));
                rt!("fp_solver", snap.write_binary(&p))?;
            }
        }
        if let Some(keep) = &fpo.marginal {
            let m = snap.marginal(keep).map_err(|e| config_err("fp.marginal", e.to_string()))?;
            let p = out.path(&format!("marginal_{k:03}.csv"));
            rt!("fp_solver", m.write_csv(&p))?;
        }
    }
    let p = out.path("monitors.csv");
    rt!("fp_solver", sol.monitors.write_csv(&p))?;
    let last = sol.monitors.rows.last().copied();
    let values = serde_json::json!({
        "stable_dt": run.stable_dt,
        "dt": run.dt,
        "steps": sol.monitors.steps,
        "initial_sup": sol.monitors.initial_sup,
        "max_growth_bound": sol.monitors.max_growth_bound,
        "l2_rate": sol.monitors.l2_rate,
        "divergence_plus": sol.monitors.divergence_plus,
        "divergence_minus": sol.monitors.divergence_minus,
        "output_times": times,
        "warnings": sol.warnings,
    });
    out.json("fp.json", &values)?;
    let mut s = format!("grid {:?} cells, {} steps of dt = {}\n", grid.cells(), sol.monitors.steps, run.dt);
    if let Some(r) = last {
        let _ = writeln!(s, "t = {}: mass {}, outflux {}, min {}, max {}", r.time, r.mass, r.outflux, r.min, r.max);
    }
    for warn in &sol.warnings {
        let _ = writeln!(s, "warning: {warn}");
    }
    Ok((s, values))
}

fn read_atoms(path: &Path, d: usize, key: &str) -> Result<EmpiricalMeasure, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(key, format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
    let weighted = header.last() == Some(&"weight");
    let width = d + usize::from(weighted);
    if header.len() != width {
        return Err(config_err(key, format!("expected {d} coordinate columns and an optional `weight`")));
    }
    let mut atoms = Vec::new();
    let mut weights = Vec::new();
    for (i, line) in lines.enumerate() {
        let vals: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| config_err(key, format!("row {}: {e}", i + 1)))?;
        if vals.len() != width {
            return Err(config_err(key, format!("row {} has {} columns", i + 1, vals.len())));
        }
        weights.push(if weighted { vals[d] } else { 1.0 });
        atoms.push(vals[..d].to_vec());
    }
    EmpiricalMeasure::new(atoms, weights).map_err(|e| config_err(key, e.to_string()))
}

fn atom_source(ctx: &Context, src: &AtomSource, key: &str) -> Result<EmpiricalMeasure, RunError> {
    match src {
        AtomSource::File(p) => read_atoms(p, ctx.d(), key),
        AtomSource::Dirac(x) => {
            if x.len() != ctx.d() {
                return Err(config_err(key, format!("need {} coordinates", ctx.d())));
            }
            Ok(EmpiricalMeasure::dirac(x.clone()))
        }
        AtomSource::LawAt(t) => {
            let w = ctx.time()?;
            if !(*t > w.s && *t <= w.t) {
                return Err(config_err(key, format!("time must lie in ({}, {}]", w.s, w.t)));
            }
            let sys = ctx.system()?;
            let plan = SimulationPlan::new(ctx.point()?, w.s, *t, ctx.dt()?, ctx.paths()?, ctx.config.seed).at_times(vec![*t]);
            let ens = rt!("sde_sim", sys.simulate(&plan))?;
            rt!("sde_sim", ens.empirical_law(*t))
        }
    }
}

fn fm_dist(ctx: &Context, out: &mut Outputs) -> Outcome {
    let fm = &ctx.config.fm;
    let a = fm.a.as_ref().ok_or_else(|| config_err("fm.a", "required by fm-dist"))?;
    let b = fm.b.as_ref().ok_or_else(|| config_err("fm.b", "required by fm-dist"))?;
    let mu = atom_source(ctx, a, "fm.a")?;
    let nu = atom_source(ctx, b, "fm.b")?;
    let problem = FmProblem::new(&ctx.algebra, &mu, &nu).map_err(|e| match e {
        measures::MeasureError::TooManyAtoms { .. } => config_err("fm", e.to_string()),
        other => runtime("measures")(other.to_string()),
    })?;
    let r = rt!("measures", measures::solve_fm(&problem, FmOptions::default()))?;
    if fm.dump {
        let p = out.path("fm_problem.json");
        rt!("measures", problem.write_json(&p))?;
    }
    let values = serde_json::json!({
        "d0": fmt_f64(r.value),
        "lipschitz": fmt_f64(r.lipschitz),
        "sup": fmt_f64(r.sup),
        "gap": fmt_f64(r.gap),
        "atoms": r.atoms,
        "arcs": r.arcs,
        "pivots": r.pivots,
    });
    out.json("fm.json", &values)?;
    let s = format!("d0 = {} over {} atoms (L = {}, M = {})\n", fmt_f64(r.value), r.atoms, r.lipschitz, r.sup);
    Ok((s, values))
}

fn holder_curve(ctx: &Context, out: &mut Outputs) -> Outcome {
    let w = ctx.time()?;
    let ho = &ctx.config.holder;
    let increments = ho.increments.clone().unwrap_or_else(|| (4..=8).map(|k| 2f64.powi(-k)).collect());
    for (i, h) in increments.iter().enumerate() {
        positive(&format!("holder.increments[{i}]"), *h)?;
    }
    let kappa_eq = positive("holder.kappa_eq", ho.kappa_eq.unwrap_or(2.0))?;
    let sup_beta = ctx.check_drift(TimeWindow { s: w.s, t: w.s + increments.iter().copied().fold(0.0, f64::max) })?;
    let c_st = match ho.c_st {
        Some(c) => positive("holder.c_st", c)?,
        None => 1.0 + ctx.drift.sup_bound().max(sup_beta),
    };
    let n = ctx.paths()?;
    if 2 * n > measures::MAX_ATOMS {
        return Err(config_err("paths", format!("at most {} paths fit the distance budget", measures::MAX_ATOMS / 2)));
    }
    let sys = ctx.system()?;
    let plan = HolderCurvePlan {
        x0: ctx.point()?,
        eps: ctx.eps()?,
        s: w.s,
        increments: increments.clone(),
        dt: ctx.dt()?,
        n,
        seed: ctx.config.seed,
    };
    let curve = measures::holder_curve(&sys, &plan).map_err(|e| match e {
        measures::MeasureError::Sde(sde::SdeError::Input(m)) => config_err("dt", m),
        other => runtime("measures")(other.to_string()),
    })?;
    let fit = measures::holder_fit(&curve, c_st, kappa_eq).map_err(|e| config_err("holder.increments", e.to_string()))?;
    let mut csv = String::from("t1,t2,d0,bound_rhs,pass\n");
    for r in &fit.rows {
        let _ = writeln!(csv, "{},{},{},{},{}", fmt_f64(w.s), fmt_f64(w.s + r.dt), fmt_f64(r.d0), fmt_f64(r.rhs), r.pass);
    }
    out.text("holder_curve.csv", &csv)?;
    let values = serde_json::json!({
        "slope": fmt_f64(fit.slope),
        "intercept": fmt_f64(fit.intercept),
        "c_st": fit.c_st,
        "kappa_eq": fit.kappa_eq,
        "bound_holds": fit.bound_holds,
    });
    out.json("holder.json", &values)?;
    let s = format!(
        "fitted slope {} over {} increments; bound d0 <= 4*C*kappa_eq*sqrt(dt) with C = {c_st}, kappa_eq = {kappa_eq}: {}\n",
        fit.slope,
        fit.rows.len(),
        if fit.bound_holds { "pass" } else { "FAIL" }
    );
    Ok((s, values))
}

fn feynman_kac(ctx: &Context, out: &mut Outputs) -> Outcome {
    let w = ctx.time()?;
    ctx.check_drift(w)?;
    let fk = &ctx.config.feynman_kac;
    let d = ctx.d();
    let sys = ctx.system()?;
    let h = fk.h.clone().unwrap_or_else(|| ScalarExpr::constant(0.0));
    h.validate(d).map_err(|e| config_err("feynman_kac.h", e.to_string()))?;
    let x = ctx.point()?;
    let mut exact = None;
    let (psi, source) = if let Some(u_text) = &fk.manufactured {
        if fk.psi.is_some() || fk.f.is_some() {
            return Err(config_err("feynman_kac.manufactured", "excludes `psi` and `f`"));
        }
        let u = SparsePolynomial::parse(u_text, d + 1, true).map_err(|e| config_err("feynman_kac.manufactured", e.to_string()))?;
        let mut at_t = vec![SparsePolynomial::zero(d); d + 1];
        for (k, v) in at_t.iter_mut().enumerate().take(d) {
            *v = SparsePolynomial::var(d, k);
        }
        let t_rat = num_rational::BigRational::from_float(w.t).ok_or_else(|| config_err("time.t", "not representable"))?;
        at_t[d] = SparsePolynomial::constant(d, t_rat);
        let psi = u.compose(&at_t);
        let mut xs = x.clone();
        xs.push(w.s);
        exact = Some(u.eval(&xs));
        (psi, rt!("feynman_kac", feynman_kac::manufactured_source(&sys, &u, &h))?)
    } else {
        let text = fk.psi.as_deref().ok_or_else(|| config_err("feynman_kac.psi", "required unless `manufactured` is set"))?;
        let psi = SparsePolynomial::parse(text, d, false).map_err(|e| config_err("feynman_kac.psi", e.to_string()))?;
        let source = match &fk.f {
            None => Source::Zero,
            Some(SourceConfig::Expr(e)) => {
                e.validate(d).map_err(|err| config_err("feynman_kac.f", err.to_string()))?;
                Source::Expr(e.clone())
            }
            Some(SourceConfig::Poly(t)) => {
                Source::Poly(SparsePolynomial::parse(t, d + 1, true).map_err(|e| config_err("feynman_kac.f", e.to_string()))?)
            }
        };
        (psi, source)
    };
    let mut problem = rt!("feynman_kac", TerminalProblem::new(&sys, psi, h, source, w.t))?;
    if let Some((c, p)) = fk.growth {
        problem = problem.with_growth(c, p);
    }
    problem
        .check(&sys, 2000, 10.0, ctx.config.seed ^ 0x9a0)
        .map_err(|e| config_err("feynman_kac", e.to_string()))?;
    let run = FkRun { dt: ctx.dt()?, n: ctx.paths()?, seed: ctx.config.seed, tolerance: fk.tolerance };
    let est = feynman_kac::fk_estimate(&sys, &problem, w.s, &x, run).map_err(|e| match e {
        feynman_kac::FkError::Sde(sde::SdeError::Input(m)) => config_err("dt", m),
        feynman_kac::FkError::Input(m) => config_err("paths", m),
        other => runtime("feynman_kac")(other.to_string()),
    })?;
    let values = serde_json::json!({
        "estimate": fmt_f64(est.estimate.mean),
        "stderr": fmt_f64(est.estimate.stderr),
        "ci_low": fmt_f64(est.estimate.ci_low),
        "ci_high": fmt_f64(est.estimate.ci_high),
        "n": est.estimate.n,
        "dt": est.dt,
        "seed": est.seed,
        "problem": {
            "s": w.s, "t": w.t, "x": x,
            "psi": problem.psi.to_string(),
            "h": problem.h,
            "manufactured": fk.manufactured,
            "exact": exact.map(fmt_f64),
        },
        "warnings": est.warnings,
    });
    out.json("fk.json", &values)?;
    let mut s = format!(
        "u({}, {:?}) ~ {} +- {} (n = {}, dt = {})\n",
        w.s, x, est.estimate.mean, est.estimate.stderr, est.estimate.n, est.dt
    );
    if let Some(e) = exact {
        let _ = writeln!(s, "exact value {e}");
    }
    for warn in &est.warnings {
        let _ = writeln!(s, "warning: {warn}");
    }
    Ok((s, values))
}

fn compare_duality(ctx: &Context, out: &mut Outputs) -> Outcome {
    let w = ctx.time()?;
    let grid = ctx.grid()?;
    let du = &ctx.config.duality;
    let n = ctx.paths()?;
    let fp_run = run_fp(ctx, &grid, w, &[w.t], ctx.config.fp.dt)?;
    let rho = &fp_run.solution.snapshots[0];
    let sys = ctx.system()?;
    let plan = SimulationPlan::new(ctx.point()?, w.s, w.t, ctx.dt()?, n, ctx.config.seed).at_times(vec![w.t]);
    let ens = rt!("sde_sim", sys.simulate(&plan))?;
    let law = rt!("sde_sim", ens.empirical_law(w.t))?;
    let bandwidth = match du.bandwidth {
        Some(b) => positive("duality.bandwidth", b)?,
        None => measures::default_bandwidth(&ctx.algebra, n),
    };
    let kde = rt!("measures", measures::kde_density(&ctx.algebra, &law, bandwidth, &grid))?;
    let l1 = rt!("measures", measures::l1_distance(&kde.field, rho))?;
    let cells = du.cells.clone().unwrap_or_else(|| vec![16; ctx.d()]);
    let gfm = measures::fortet_mourier_fields(&ctx.algebra, &kde.field, rho, &cells).map_err(|e| match e {
        measures::MeasureError::TooManyAtoms { .. } | measures::MeasureError::Input(_) => config_err("duality.cells", e.to_string()),
        other => runtime("measures")(other.to_string()),
    })?;
    let l1_thr = du.l1_threshold.unwrap_or(0.10);
    let d0_thr = du.d0_threshold.unwrap_or(0.05);
    let d0 = gfm.result.value;
    let csv = format!(
        "t,l1,d0,collapse_bound,bandwidth,leakage\n{},{},{},{},{},{}\n",
        fmt_f64(w.t),
        fmt_f64(l1),
        fmt_f64(d0),
        fmt_f64(gfm.collapse_bound),
        fmt_f64(bandwidth),
        fmt_f64(kde.leakage)
    );
    out.text("duality.csv", &csv)?;
    let values = serde_json::json!({
        "t": w.t,
        "l1": fmt_f64(l1),
        "d0": fmt_f64(d0),
        "collapse_bound": fmt_f64(gfm.collapse_bound),
        "cells": cells,
        "bandwidth": fmt_f64(bandwidth),
        "kde_leakage": fmt_f64(kde.leakage),
        "fp_mass": fmt_f64(rho.mass()),
        "l1_pass": l1 <= l1_thr,
        "d0_pass": d0 <= d0_thr,
    });
    out.json("duality.json", &values)?;
    let pass = |b: bool| if b { "pass" } else { "FAIL" };
    let s = format!(
        "t = {}: L1 {} (<= {l1_thr}: {}), d0 {} (<= {d0_thr}: {}), cell-collapse bound {}\nKDE bandwidth {} with leakage {}\n",
        w.t,
        l1,
        pass(l1 <= l1_thr),
        d0,
        pass(d0 <= d0_thr),
        gfm.collapse_bound,
        bandwidth,
        kde.leakage
    );
    Ok((s, values))
}
