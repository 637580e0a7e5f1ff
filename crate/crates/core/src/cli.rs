//! Batch driver: model files in, JSON/CSV reports and a run manifest out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dioph::{self, Ball, DiophParams, Sampler};
use crate::error::{Error, Result};
use crate::herman::{self, SweepConfig};
use crate::revlin::{self, build_unfolding, Unfolding};
use crate::systems::{self, SystemSpec};
use crate::torus::{self, SolverConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Validate,
    Classify,
    Dioph,
    Measure,
    Solve,
    Sweep,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Classify => "classify",
            Command::Dioph => "dioph",
            Command::Measure => "measure",
            Command::Solve => "solve",
            Command::Sweep => "sweep",
        }
    }
}

/// A fully resolved run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub model_path: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// flat overrides onto the solver, sweep and Diophantine settings
    pub overrides: BTreeMap<String, String>,
}

#[derive(Debug, Parser)]
#[command(name = "kamrev2", version, about = "Reducible invariant tori of quasi-periodically forced reversible systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Parse a model and check dimensions, order conditions and reversibility
    Validate(CommonArgs),
    /// Classify the spectrum of M(μ₀) and build the unfolding
    Classify(CommonArgs),
    /// Affine Diophantine check of ((F(μ₀), Ω), β(μ₀)); `dioph measure` estimates measures
    Dioph {
        #[arg(value_enum, default_value = "check")]
        mode: DiophMode,
        #[command(flatten)]
        args: CommonArgs,
    },
    /// Fraction of the ball Γ on which the unperturbed pair is Diophantine
    Measure(CommonArgs),
    /// Torus of the original system at μ₀, with counterterms and diagnostics
    Solve(CommonArgs),
    /// Sweep Γ and emit the Whitney family with measure bookkeeping
    Sweep(CommonArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DiophMode {
    Check,
    Measure,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// model JSON file
    #[arg(long)]
    pub model: PathBuf,
    /// output directory
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// cutoff |k|₁ of Diophantine checks
    #[arg(long)]
    pub kmax: Option<u32>,
    /// parameter grid points per axis
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub eps2: Option<f64>,
    /// order of the smoothness report
    #[arg(long)]
    pub cl: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// worker threads (0: logical cores)
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// radius of the parameter ball Γ
    #[arg(long)]
    pub radius: Option<f64>,
    /// nondegeneracy order Q
    #[arg(long)]
    pub q: Option<u32>,
    /// Fourier cutoff |k|∞ of the torus solver
    #[arg(long)]
    pub fourier: Option<usize>,
    /// parameter point, comma separated
    #[arg(long)]
    pub mu0: Option<String>,
    /// extra `key=value` overrides
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl CommonArgs {
    fn overrides(&self) -> Result<BTreeMap<String, String>> {
        let mut o = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.insert(k.to_string(), v);
            }
        };
        put("tau", self.tau.map(|v| v.to_string()));
        put("gamma", self.gamma.map(|v| v.to_string()));
        put("kmax", self.kmax.map(|v| v.to_string()));
        put("grid", self.grid.map(|v| v.to_string()));
        put("eps2", self.eps2.map(|v| v.to_string()));
        put("cl", self.cl.map(|v| v.to_string()));
        put("radius", self.radius.map(|v| v.to_string()));
        put("q", self.q.map(|v| v.to_string()));
        put("fourier", self.fourier.map(|v| v.to_string()));
        put("mu0", self.mu0.clone());
        put("threads", Some(self.threads.to_string()));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override {kv:?} is not KEY=VALUE")))?;
            o.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(o)
    }
}

impl Cli {
    pub fn into_run_config(self) -> Result<RunConfig> {
        let (command, args, extra) = match self.command {
            CliCommand::Validate(a) => (Command::Validate, a, None),
            CliCommand::Classify(a) => (Command::Classify, a, None),
            CliCommand::Dioph { mode: DiophMode::Check, args } => (Command::Dioph, args, None),
            CliCommand::Dioph { mode: DiophMode::Measure, args } => (Command::Measure, args, None),
            CliCommand::Measure(a) => (Command::Measure, a, None::<()>),
            CliCommand::Solve(a) => (Command::Solve, a, None),
            CliCommand::Sweep(a) => (Command::Sweep, a, None),
        };
        let _ = extra;
        Ok(RunConfig {
            command,
            model_path: args.model.clone(),
            output_dir: args.out.clone(),
            seed: args.seed,
            overrides: args.overrides()?,
        })
    }
}

const KNOWN_KEYS: &[&str] = &[
    "tau", "gamma", "kmax", "grid", "eps2", "cl", "radius", "q", "fourier", "mu0", "threads", "collocation",
    "newton_tol", "max_iters", "gate", "horizon", "points", "sampler", "gammas", "key_tol", "fd_step",
];

/// Settings after applying overrides to the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub dioph: DiophParams,
    pub dioph_kmax: u32,
    pub solver: SolverConfig,
    pub sweep: SweepConfig,
    pub mu0: Vec<f64>,
    pub horizon: f64,
    pub sampler: Sampler,
    pub threads: usize,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidConfig(format!("cannot parse {key} = {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

pub fn resolve(spec: &SystemSpec, o: &BTreeMap<String, String>, seed: u64) -> Result<Resolved> {
    for k in o.keys() {
        if !KNOWN_KEYS.contains(&k.as_str()) {
            return Err(Error::InvalidConfig(format!("unknown setting {k:?}")));
        }
    }
    let get = |k: &str| o.get(k).map(|s| s.as_str());
    let d = spec.dims;
    let tau = match get("tau") {
        Some(v) => parse_num("tau", v)?,
        None => spec.dioph_star.tau.max((d.n + d.big_n) as f64 + 0.5),
    };
    let gamma = match get("gamma") {
        Some(v) => parse_num("gamma", v)?,
        None => 1e-4,
    };
    let dioph = DiophParams::new(tau, gamma, 2)?;
    let dioph_kmax = match get("kmax") {
        Some(v) => parse_num("kmax", v)?,
        None => dioph::DEFAULT_KMAX,
    };
    let mut solver = SolverConfig::default();
    if let Some(v) = get("fourier") {
        solver.k_max = parse_num("fourier", v)?;
    }
    if let Some(v) = get("collocation") {
        solver.grid = Some(parse_num("collocation", v)?);
    }
    if let Some(v) = get("newton_tol") {
        solver.newton_tol = parse_num("newton_tol", v)?;
    }
    if let Some(v) = get("max_iters") {
        solver.max_iters = parse_num("max_iters", v)?;
    }
    if let Some(v) = get("gate") {
        solver.perturbation_gate = parse_num("gate", v)?;
    }
    let radius = match get("radius") {
        Some(v) => parse_num("radius", v)?,
        None => 1.0,
    };
    let grid = match get("grid") {
        Some(v) => parse_num("grid", v)?,
        None => 101,
    };
    let eps2 = match get("eps2") {
        Some(v) => parse_num("eps2", v)?,
        None => 0.1,
    };
    let mut sweep = SweepConfig::new(radius, grid, eps2, dioph);
    sweep.solver = solver.clone();
    sweep.dioph_kmax = dioph_kmax;
    if let Some(v) = get("q") {
        sweep.q_order = parse_num("q", v)?;
    }
    if let Some(v) = get("cl") {
        sweep.cl = parse_num("cl", v)?;
    }
    if let Some(v) = get("gammas") {
        sweep.gamma_table = parse_list("gammas", v)?;
    }
    if let Some(v) = get("key_tol") {
        sweep.key.tol = parse_num("key_tol", v)?;
    }
    if let Some(v) = get("fd_step") {
        sweep.key.fd_step = parse_num("fd_step", v)?;
    }
    let mu0 = match get("mu0") {
        Some(v) => parse_list("mu0", v)?,
        None => vec![0.0; d.s],
    };
    if mu0.len() != d.s {
        return Err(Error::DimensionMismatch(format!("mu0 has {} entries, the model has s = {}", mu0.len(), d.s)));
    }
    let horizon = match get("horizon") {
        Some(v) => parse_num("horizon", v)?,
        None => 0.0,
    };
    let sampler = match get("sampler").unwrap_or("grid") {
        "grid" => Sampler::Grid { points_per_axis: grid },
        "mc" | "montecarlo" => Sampler::MonteCarlo {
            points: match get("points") {
                Some(v) => parse_num("points", v)?,
                None => 10_000,
            },
            seed,
        },
        other => return Err(Error::InvalidConfig(format!("unknown sampler {other:?}"))),
    };
    let threads = match get("threads") {
        Some(v) => parse_num("threads", v)?,
        None => 0,
    };
    Ok(Resolved { dioph, dioph_kmax, solver, sweep, mu0, horizon, sampler, threads })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub model_path: String,
    pub model_sha256: Option<String>,
    pub seed: u64,
    pub overrides: BTreeMap<String, String>,
    pub resolved: Option<Resolved>,
    pub exit_code: i32,
    pub error: Option<String>,
    pub outputs: Vec<OutputEntry>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T, outputs: &mut Vec<String>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(dir.join(name), text)?;
    outputs.push(name.to_string());
    Ok(())
}

fn unfolding_for(spec: &SystemSpec) -> Result<Unfolding> {
    build_unfolding(&spec.m, &spec.r)
}

/// `β(μ)` of the unperturbed matrix, empty when `p = 0`.
fn beta_at(spec: &SystemSpec, unf: &Unfolding, mu: &[f64]) -> Vec<f64> {
    if spec.dims.p == 0 {
        return Vec::new();
    }
    unf.spectrum(mu, &vec![0.0; unf.s_unf()]).map(|s| s.beta).unwrap_or_default()
}

struct Outcome {
    code: i32,
    error: Option<String>,
}

fn execute(cfg: &RunConfig, res: &Resolved, spec: &SystemSpec, outputs: &mut Vec<String>) -> Result<Outcome> {
    let dir = &cfg.output_dir;
    let ok = Outcome { code: 0, error: None };
    match cfg.command {
        Command::Validate => {
            let report = serde_json::json!({
                "valid": true,
                "dims": spec.dims,
                "perturbation": spec.perturbation_norms(),
                "reversibility_residual": systems::reversibility_residual(spec),
            });
            write_json(dir, "validation.json", &report, outputs)?;
            Ok(ok)
        }
        Command::Classify => {
            let unf = unfolding_for(spec)?;
            let m = spec.m.eval(&res.mu0);
            let spectrum =
                if spec.dims.p > 0 { Some(revlin::classify_spectrum(&m, &spec.r, revlin::CLASSIFY_TOL)?) } else { None };
            let rank = revlin::submersivity_rank(&unf, &res.mu0, &vec![0.0; unf.s_unf()])?;
            let dirs: Vec<Vec<Vec<f64>>> = unf
                .directions
                .iter()
                .map(|v| (0..v.nrows()).map(|i| (0..v.ncols()).map(|j| v[(i, j)]).collect()).collect())
                .collect();
            let report = serde_json::json!({
                "mu0": res.mu0,
                "spectrum": spectrum,
                "unfolding_directions": dirs,
                "submersivity_rank": rank,
                "required_rank": spec.dims.p,
            });
            write_json(dir, "classify.json", &report, outputs)?;
            Ok(ok)
        }
        Command::Dioph => {
            let unf = unfolding_for(spec)?;
            let mut f = herman::base_frequency(spec, &[], &res.mu0);
            f.extend_from_slice(&spec.omega);
            let beta = beta_at(spec, &unf, &res.mu0);
            let rep = dioph::affine_dioph_check(&f, &beta, &res.dioph, res.dioph_kmax)?;
            write_json(dir, "dioph.json", &rep, outputs)?;
            if rep.passed() {
                Ok(ok)
            } else {
                Ok(Outcome { code: 4, error: Some(format!("pair is not Diophantine; worst k = {:?}", rep.worst_k)) })
            }
        }
        Command::Measure => {
            let unf = unfolding_for(spec)?;
            let ball = Ball { center: vec![0.0; spec.dims.s], radius: res.sweep.radius };
            let star = DiophParams::new(spec.dioph_star.tau, spec.dioph_star.gamma, 1)?;
            let rep = dioph::measure_estimate(
                &ball,
                |mu| herman::base_frequency(spec, &[], mu),
                |mu| beta_at(spec, &unf, mu),
                &spec.omega,
                &star,
                &res.dioph,
                &res.sampler,
                res.dioph_kmax,
            )?;
            write_json(dir, "measure.json", &rep, outputs)?;
            Ok(ok)
        }
        Command::Solve => {
            let unf = unfolding_for(spec)?;
            let sol = herman::solve_point(spec, &unf, &res.sweep, &res.mu0)?;
            let t = &sol.transform;
            let fr = torus::floquet_residual(spec, &unf, t)?;
            let integration =
                if res.horizon > 0.0 { Some(torus::verify_by_integration(spec, &unf, t, res.horizon)?) } else { None };
            let report = serde_json::json!({
                "mu": res.mu0,
                "Theta": t.v,
                "Upsilon": sol.upsilon,
                "Phi": sol.key.phi,
                "Psi": sol.key.psi,
                "consistency": sol.consistency,
                "floquet_residual": fr,
                "symmetry_residuals": t.symmetry_residuals(spec.r.matrix()),
                "x_component_residual": t.x_component_residual(spec),
                "convergence_order": torus::convergence_order(&t.history),
                "integration": integration,
            });
            write_json(dir, "transform.json", &t.to_json(Some(&report)), outputs)?;
            Ok(ok)
        }
        Command::Sweep => {
            let unf = unfolding_for(spec)?;
            let fam = herman::sweep(spec, &unf, &res.sweep)?;
            herman::write_outputs(&fam, dir)?;
            outputs.extend(["family.json", "measures.csv", "theta.csv", "long.csv"].map(String::from));
            let whitney = match herman::whitney_report(&fam, res.sweep.cl) {
                Ok(r) => serde_json::to_value(r)?,
                Err(e) => serde_json::json!({ "error": e.to_string() }),
            };
            write_json(dir, "whitney.json", &whitney, outputs)?;
            Ok(ok)
        }
    }
}

/// Runs one command and writes `run_manifest.json`; returns the exit status.
pub fn run(cfg: &RunConfig) -> i32 {
    if let Err(e) = std::fs::create_dir_all(&cfg.output_dir) {
        log::error!("cannot create {}: {e}", cfg.output_dir.display());
        return 2;
    }
    let mut outputs = Vec::new();
    let mut resolved = None;
    let model_sha256 = sha256_file(&cfg.model_path).ok();
    let result = (|| -> Result<Outcome> {
        let text = std::fs::read_to_string(&cfg.model_path)?;
        // `dioph` reports on resonant forcing instead of refusing the model
        let spec = if cfg.command == Command::Dioph {
            SystemSpec::from_json_unchecked(&text)?
        } else {
            let kmax = match cfg.overrides.get("kmax") {
                Some(v) => parse_num("kmax", v)?,
                None => dioph::DEFAULT_KMAX,
            };
            systems::parse_system(&text, kmax)?
        };
        let res = resolve(&spec, &cfg.overrides, cfg.seed)?;
        resolved = Some(res.clone());
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(res.threads)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| execute(cfg, &res, &spec, &mut outputs))
    })();
    let outcome = match result {
        Ok(o) => o,
        Err(e) => Outcome { code: e.exit_code(), error: Some(e.to_string()) },
    };
    if let Some(e) = &outcome.error {
        log::error!("{e}");
    }
    let hashed = outputs
        .iter()
        .map(|f| OutputEntry { file: f.clone(), sha256: sha256_file(&cfg.output_dir.join(f)).unwrap_or_default() })
        .collect();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: cfg.command.name().to_string(),
        model_path: cfg.model_path.display().to_string(),
        model_sha256,
        seed: cfg.seed,
        overrides: cfg.overrides.clone(),
        resolved,
        exit_code: outcome.code,
        error: outcome.error,
        outputs: hashed,
    };
    let mut sink = Vec::new();
    if let Err(e) = write_json(&cfg.output_dir, "run_manifest.json", &manifest, &mut sink) {
        log::error!("cannot write manifest: {e}");
        return outcome.code.max(2);
    }
    outcome.code
}

/// Logging from `KAMREV2_LOG` (default `warn`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("KAMREV2_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

/// Entry point of the binary.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match cli.into_run_config() {
        Ok(cfg) => run(&cfg),
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
