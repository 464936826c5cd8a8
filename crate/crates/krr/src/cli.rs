//! Argument parsing and job resolution.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use krr_core::bootstrap::{BootstrapConfig, MultiplierScheme, VarianceMode, WidthMode};
use krr_core::kernels::{self, MallowsConvention};
use krr_core::school_choice::{MarketConfig, MatchScenario};
use krr_core::simulation::{CdfTarget, Scenario, ScenarioName};
use krr_core::spectral;
use krr_core::{InputPoint, KernelFamily, KernelSpec, Lambda, MaternSmoothness};

use crate::error::{CliError, Result};
use crate::io;
use crate::jobs::{BandJob, CdfJob, CoverageJob, FitJob, Job, MatchJob, PredictJob, SpectrumJob, SpectrumSource};
use crate::manifest::{OutputRecord, RunManifest};

pub const SEED_ENV: &str = "KRR_SEED";

#[derive(Debug, Parser)]
#[command(name = "krr", version, about = "Kernel ridge regression with bootstrap confidence bands")]
pub struct Cli {
    /// Worker threads; defaults to the number of available cores. Outputs do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Manifest path; defaults to `<out>.manifest.json` or `<out-dir>/manifest.json`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    /// Log more (`-v` info, `-vv` debug). `RUST_LOG` overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and save it.
    Fit(FitArgs),
    /// Evaluate a saved model on a grid.
    Predict(PredictArgs),
    /// Bootstrap confidence band for a saved model.
    Band(BandArgs),
    /// Coverage study for a simulation scenario.
    Coverage(CoverageArgs),
    /// Sampling law of the sup error against the bootstrap law.
    Cdf(CdfArgs),
    /// Eigen-diagnostics of a Gram matrix.
    Spectrum(SpectrumArgs),
    /// School-choice match-effects experiment.
    Match(MatchArgs),
    /// Rerun the job recorded in a manifest and check its outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelKind {
    Linear,
    Polynomial,
    Gaussian,
    Matern,
    Mallows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    Reciprocal,
    Raw,
    HalfInverseSquare,
}

impl From<ConventionArg> for MallowsConvention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Reciprocal => MallowsConvention::Reciprocal,
            ConventionArg::Raw => MallowsConvention::Raw,
            ConventionArg::HalfInverseSquare => MallowsConvention::HalfInverseSquare,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct KernelArgs {
    #[arg(long, value_enum)]
    pub kernel: KernelKind,
    /// Lengthscale, or `median` for the median heuristic.
    #[arg(long, default_value = "median")]
    pub lengthscale: String,
    /// How the median discordance becomes a Mallows lengthscale.
    #[arg(long, value_enum, default_value = "reciprocal")]
    pub mallows_convention: ConventionArg,
    #[arg(long, default_value_t = 2)]
    pub degree: u32,
    #[arg(long, default_value_t = 1.0)]
    pub offset: f64,
    /// Matérn ν: 0.5, 1.5 or 2.5.
    #[arg(long, default_value_t = 1.5)]
    pub smoothness: f64,
    /// `κ` with `k(s,t) ≤ κ²`; linear and polynomial kernels default to the data maximum of `√k(x,x)`.
    #[arg(long)]
    pub sup_bound: Option<f64>,
}

impl KernelArgs {
    /// Resolves the kernel against the inputs it will be used on.
    pub fn resolve(&self, xs: &[InputPoint]) -> Result<KernelSpec> {
        let lengthscale = || -> Result<f64> {
            if self.lengthscale == "median" {
                let h = kernels::median_heuristic(xs)?;
                Ok(match self.kernel {
                    KernelKind::Mallows => h.mallows_lengthscale(self.mallows_convention.into()),
                    _ => h.lengthscale(),
                })
            } else {
                self.lengthscale.parse::<f64>().map_err(|_| {
                    CliError::config(format!("lengthscale must be a number or \"median\", got {:?}", self.lengthscale))
                })
            }
        };
        let family = match self.kernel {
            KernelKind::Linear => KernelFamily::Linear,
            KernelKind::Polynomial => KernelFamily::Polynomial { degree: self.degree, offset: self.offset },
            KernelKind::Gaussian => KernelFamily::Gaussian { lengthscale: lengthscale()? },
            KernelKind::Matern => KernelFamily::Matern {
                smoothness: MaternSmoothness::from_value(self.smoothness)?,
                lengthscale: lengthscale()?,
            },
            KernelKind::Mallows => KernelFamily::Mallows { lengthscale: lengthscale()? },
        };
        let sup_bound = match self.sup_bound {
            Some(b) => b,
            None if family.is_normalized() => 1.0,
            None => {
                let probe = KernelSpec::new(family, 0.0)?;
                let mut max = 0.0f64;
                for x in xs {
                    max = max.max(kernels::kernel_eval(&probe, x, x)?);
                }
                max.sqrt()
            }
        };
        Ok(KernelSpec::new(family, sup_bound)?)
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Training CSV with a `y` column and `x…` or `ranking` inputs.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub kernel: KernelArgs,
    /// Regularization, a positive number or `auto` for `n^{-1/3}`.
    #[arg(long, default_value = "auto")]
    pub lambda: String,
    /// Model file to write.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `auto`, `auto:N` or a CSV/text file of points.
    #[arg(long, default_value = "auto")]
    pub grid: String,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WidthArg {
    Fixed,
    Variable,
    Hnorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VarianceArg {
    Auto,
    Plain,
    Small,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Full,
    Centered,
}

impl From<SchemeArg> for MultiplierScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Full => MultiplierScheme::FullMatrix,
            SchemeArg::Centered => MultiplierScheme::Centered,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BandArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "auto")]
    pub grid: String,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 500)]
    pub draws: usize,
    #[arg(long, value_enum, default_value = "variable")]
    pub width: WidthArg,
    #[arg(long, value_enum, default_value = "auto")]
    pub variance: VarianceArg,
    #[arg(long, value_enum, default_value = "full")]
    pub scheme: SchemeArg,
    /// Band expansion factor `δ` (half-widths scale by `1 + δ`).
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    /// Seed; falls back to `KRR_SEED`, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Also write the bootstrap statistics, one per line.
    #[arg(long)]
    pub dump_draws: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// Scenario TOML; command-line values override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// gaussian_eigen, sobolev1, sobolev2, step_misspec or ranking.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    /// Seed; falls back to the config file, then `KRR_SEED`, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CoverageArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    True,
    Pseudo,
}

#[derive(Debug, Clone, Args)]
pub struct CdfArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, value_enum, default_value = "true")]
    pub target: TargetArg,
}

#[derive(Debug, Clone, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["gram", "data", "market"])))]
pub struct SpectrumArgs {
    /// Header-less CSV holding a square Gram matrix.
    #[arg(long)]
    pub gram: Option<PathBuf>,
    /// Data CSV or ranking text file; needs `--kernel`.
    #[arg(long, requires = "kernel")]
    pub data: Option<PathBuf>,
    /// Market TOML; the Gram matrix is the Mallows kernel on simulated preferences.
    #[arg(long)]
    pub market: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kernel: Option<KernelKind>,
    #[arg(long, default_value = "median")]
    pub lengthscale: String,
    #[arg(long, value_enum, default_value = "reciprocal")]
    pub mallows_convention: ConventionArg,
    #[arg(long, default_value_t = 2)]
    pub degree: u32,
    #[arg(long, default_value_t = 1.0)]
    pub offset: f64,
    #[arg(long, default_value_t = 1.5)]
    pub smoothness: f64,
    #[arg(long)]
    pub sup_bound: Option<f64>,
    /// Market replicate whose preferences are used.
    #[arg(long, default_value_t = 0)]
    pub rep: usize,
    /// Only the `k` leading eigenvalues.
    #[arg(long)]
    pub top: Option<usize>,
    /// Comma-separated λ values for the effective-dimension map.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MatchScenarioArg {
    Null,
    Match,
}

#[derive(Debug, Clone, Args)]
pub struct MatchArgs {
    /// Market TOML; command-line values override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scenario: Option<MatchScenarioArg>,
    #[arg(long)]
    pub n_students: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Skip the digest comparison.
    #[arg(long)]
    pub no_verify: bool,
}

/// `KRR_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| CliError::config(format!("{SEED_ENV}={v:?} is not a u64"))),
        Err(_) => Ok(None),
    }
}

fn seed_or_env(flag: Option<u64>) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

/// Reads a TOML config and reports whether it set `seed` explicitly.
fn load_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, bool)> {
    match path {
        None => Ok((T::default(), false)),
        Some(p) => {
            let table: toml::Table = io::read_toml(p)?;
            let has_seed = table.contains_key("seed");
            Ok((io::read_toml(p)?, has_seed))
        }
    }
}

fn config_seed(flag: Option<u64>, from_file: Option<u64>) -> Result<u64> {
    match (flag, from_file) {
        (Some(s), _) | (None, Some(s)) => Ok(s),
        (None, None) => Ok(env_seed()?.unwrap_or(0)),
    }
}

fn parse_lambda(s: &str) -> Result<Lambda> {
    Ok(s.parse::<Lambda>()?)
}

impl ScenarioArgs {
    pub fn resolve(&self) -> Result<Scenario> {
        let (mut sc, has_seed): (Scenario, bool) = load_config(self.config.as_deref())?;
        if let Some(name) = &self.scenario {
            sc.name = name.parse::<ScenarioName>()?;
        }
        if let Some(n) = self.n {
            sc.n = n;
        }
        if let Some(r) = self.reps {
            sc.reps = r;
        }
        if let Some(d) = self.draws {
            sc.draws = d;
        }
        if let Some(a) = self.alpha {
            sc.alpha = a;
        }
        if let Some(l) = &self.lambda {
            sc.lambda = parse_lambda(l)?;
        }
        if let Some(g) = self.grid_size {
            sc.grid_size = g;
        }
        sc.seed = config_seed(self.seed, has_seed.then_some(sc.seed))?;
        sc.validate()?;
        Ok(sc)
    }
}

impl SpectrumArgs {
    fn kernel_args(&self, kernel: KernelKind) -> KernelArgs {
        KernelArgs {
            kernel,
            lengthscale: self.lengthscale.clone(),
            mallows_convention: self.mallows_convention,
            degree: self.degree,
            offset: self.offset,
            smoothness: self.smoothness,
            sup_bound: self.sup_bound,
        }
    }
}

/// Turns parsed arguments into a job. `Replay` has no job of its own.
pub fn resolve(command: &Command) -> Result<Job> {
    Ok(match command {
        Command::Fit(a) => {
            let data = io::read_dataset(&a.data)?;
            let spec = a.kernel.resolve(data.xs())?;
            let lambda_rule = parse_lambda(&a.lambda)?;
            let lambda = lambda_rule.resolve(data.len())?;
            Job::Fit(FitJob { data: a.data.clone(), spec, lambda_rule, lambda, out: a.out.clone() })
        }
        Command::Predict(a) => {
            Job::Predict(PredictJob { model: a.model.clone(), grid: a.grid.clone(), out: a.out.clone() })
        }
        Command::Band(a) => {
            let bootstrap = BootstrapConfig {
                draws: a.draws,
                alpha: a.alpha,
                width_mode: match a.width {
                    WidthArg::Fixed => WidthMode::Fixed,
                    WidthArg::Variable => WidthMode::Variable,
                    WidthArg::Hnorm => WidthMode::Hnorm,
                },
                variance_mode: match a.variance {
                    VarianceArg::Auto => VarianceMode::Auto,
                    VarianceArg::Plain => VarianceMode::Plain,
                    VarianceArg::Small => VarianceMode::SmallSample,
                },
                delta_expansion: a.delta,
                seed: seed_or_env(a.seed)?,
                scheme: a.scheme.into(),
            };
            bootstrap.validate()?;
            Job::Band(BandJob {
                model: a.model.clone(),
                grid: a.grid.clone(),
                bootstrap,
                out: a.out.clone(),
                draws_out: a.dump_draws.clone(),
            })
        }
        Command::Coverage(a) => {
            Job::Coverage(CoverageJob { scenario: a.scenario.resolve()?, out_dir: a.scenario.out_dir.clone() })
        }
        Command::Cdf(a) => Job::Cdf(CdfJob {
            scenario: a.scenario.resolve()?,
            target: match a.target {
                TargetArg::True => CdfTarget::True,
                TargetArg::Pseudo => CdfTarget::Pseudo,
            },
            out_dir: a.scenario.out_dir.clone(),
        }),
        Command::Spectrum(a) => {
            let source = if let Some(path) = &a.gram {
                SpectrumSource::Gram { path: path.clone() }
            } else if let Some(path) = &a.data {
                let kernel = a.kernel.ok_or_else(|| CliError::config("--data needs --kernel"))?;
                let xs = io::read_points(path)?;
                SpectrumSource::Points { path: path.clone(), spec: a.kernel_args(kernel).resolve(&xs)? }
            } else if let Some(path) = &a.market {
                let (market, _): (MarketConfig, bool) = load_config(Some(path))?;
                market.validate()?;
                SpectrumSource::Market { market, rep: a.rep, convention: a.mallows_convention.into() }
            } else {
                return Err(CliError::config("one of --gram, --data or --market is required"));
            };
            if a.top == Some(0) {
                return Err(CliError::config("--top must be ≥ 1"));
            }
            Job::Spectrum(SpectrumJob {
                source,
                top: a.top,
                lambdas: a.lambdas.clone().unwrap_or_else(spectral::default_lambda_grid),
                seed: seed_or_env(a.seed)?,
                out_dir: a.out_dir.clone(),
            })
        }
        Command::Match(a) => {
            let (mut market, has_seed): (MarketConfig, bool) = load_config(a.config.as_deref())?;
            if let Some(s) = a.scenario {
                market.scenario = match s {
                    MatchScenarioArg::Null => MatchScenario::Null,
                    MatchScenarioArg::Match => MatchScenario::Match,
                };
            }
            if let Some(n) = a.n_students {
                market.n_students = n;
            }
            market.seed = config_seed(a.seed, has_seed.then_some(market.seed))?;
            market.validate()?;
            Job::Match(MatchJob { market, reps: a.reps, out_dir: a.out_dir.clone() })
        }
        Command::Replay(_) => return Err(CliError::config("replay has no job of its own")),
    })
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = threads.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::config(format!("cannot start {n} worker threads: {e}")))
}

/// Runs a job inside a pool of `threads` workers and writes its manifest.
pub fn run_job(
    job: &Job,
    args: Vec<String>,
    threads: Option<usize>,
    manifest_path: Option<&Path>,
) -> Result<(RunManifest, String)> {
    if threads == Some(0) {
        return Err(CliError::config("--threads must be ≥ 1"));
    }
    let pool = thread_pool(threads)?;
    let start = Instant::now();
    let outcome = pool.install(|| job.execute())?;
    let wall = start.elapsed().as_secs_f64();
    let outputs = outcome.outputs.iter().map(|p| OutputRecord::of(p)).collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        command: job.name().to_string(),
        args,
        job: serde_json::to_value(job).map_err(|e| CliError::config(e.to_string()))?,
        seed: job.seed(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        threads: pool.current_num_threads(),
        wall_time_secs: wall,
        outputs,
    };
    let path = manifest_path.map(Path::to_path_buf).unwrap_or_else(|| job.default_manifest());
    manifest.write(&path)?;
    log::info!("{} finished in {wall:.2} s; manifest {}", job.name(), path.display());
    Ok((manifest, outcome.summary))
}

/// Reruns the job in a manifest. With `verify`, every recorded output must
/// come back byte for byte.
pub fn replay(path: &Path, threads: Option<usize>, verify: bool) -> Result<String> {
    let manifest = RunManifest::read(path)?;
    let job: Job = serde_json::from_value(manifest.job.clone()).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("job: {e}"),
    })?;
    let pool = thread_pool(threads)?;
    let outcome = pool.install(|| job.execute())?;
    if verify {
        let mut bad = Vec::new();
        for rec in &manifest.outputs {
            let now = OutputRecord::of(&rec.path)?;
            if now.sha256 != rec.sha256 {
                bad.push(rec.path.display().to_string());
            }
        }
        if !bad.is_empty() {
            return Err(CliError::Mismatch(bad.join(", ")));
        }
    }
    let mut summary = outcome.summary;
    summary.push_str(&format!("replayed\t{}\nverified\t{}\n", manifest.outputs.len(), verify));
    Ok(summary)
}

/// Entry point shared by the binary and the tests. Returns the text for stdout.
pub fn run(cli: &Cli, args: Vec<String>) -> Result<String> {
    match &cli.command {
        Command::Replay(r) => replay(&r.manifest, cli.threads, !r.no_verify),
        command => {
            let job = resolve(command)?;
            let (_, summary) = run_job(&job, args, cli.threads, cli.manifest.as_deref())?;
            Ok(summary)
        }
    }
}
