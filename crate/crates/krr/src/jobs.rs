//! Fully resolved units of work.
//!
//! The command line is turned into a [`Job`] before anything runs. The job is
//! what the manifest stores and what `replay` executes, so it carries every
//! value that influences the outputs.

use std::path::{Path, PathBuf};

use krr_core::bootstrap::{self, BootstrapConfig, VarianceMode, WidthMode};
use krr_core::kernels::{self, MallowsConvention};
use krr_core::school_choice::{self, MarketConfig, MatchRun};
use krr_core::simulation::{self, CdfTarget, CoverageReport, Scenario};
use krr_core::spectral::{self, DecayFit};
use krr_core::{krr, parallel, InputPoint, KernelSpec, Lambda};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::{self, num};
use crate::manifest;
use crate::model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Job {
    Fit(FitJob),
    Predict(PredictJob),
    Band(BandJob),
    Coverage(CoverageJob),
    Cdf(CdfJob),
    Spectrum(SpectrumJob),
    Match(MatchJob),
}

/// Files written by a job plus a short human-readable summary for stdout.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub summary: String,
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Fit(_) => "fit",
            Job::Predict(_) => "predict",
            Job::Band(_) => "band",
            Job::Coverage(_) => "coverage",
            Job::Cdf(_) => "cdf",
            Job::Spectrum(_) => "spectrum",
            Job::Match(_) => "match",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Job::Fit(_) | Job::Predict(_) => None,
            Job::Band(j) => Some(j.bootstrap.seed),
            Job::Coverage(j) => Some(j.scenario.seed),
            Job::Cdf(j) => Some(j.scenario.seed),
            Job::Spectrum(j) => Some(j.seed),
            Job::Match(j) => Some(j.market.seed),
        }
    }

    /// Where the manifest goes unless overridden.
    pub fn default_manifest(&self) -> PathBuf {
        match self {
            Job::Fit(j) => manifest::beside(&j.out),
            Job::Predict(j) => manifest::beside(&j.out),
            Job::Band(j) => manifest::beside(&j.out),
            Job::Coverage(j) => j.out_dir.join("manifest.json"),
            Job::Cdf(j) => j.out_dir.join("manifest.json"),
            Job::Spectrum(j) => j.out_dir.join("manifest.json"),
            Job::Match(j) => j.out_dir.join("manifest.json"),
        }
    }

    pub fn execute(&self) -> Result<Outcome> {
        match self {
            Job::Fit(j) => j.execute(),
            Job::Predict(j) => j.execute(),
            Job::Band(j) => j.execute(),
            Job::Coverage(j) => j.execute(),
            Job::Cdf(j) => j.execute(),
            Job::Spectrum(j) => j.execute(),
            Job::Match(j) => j.execute(),
        }
    }
}

// ---------------------------------------------------------------------------
// fit / predict / band
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitJob {
    pub data: PathBuf,
    pub spec: KernelSpec,
    /// The rule as given (`auto` or a number).
    pub lambda_rule: Lambda,
    /// The value actually used.
    pub lambda: f64,
    pub out: PathBuf,
}

impl FitJob {
    fn execute(&self) -> Result<Outcome> {
        let data = io::read_dataset(&self.data)?;
        let model = krr::fit(&self.spec, &data, self.lambda)?;
        let path = model::save_model(&self.out, &model)?;
        let rnorm = model.residuals().norm();
        log::info!("fitted {} on n = {} with λ = {}", self.spec, model.n(), self.lambda);
        Ok(Outcome {
            outputs: vec![path],
            summary: format!("lambda\t{}\nresidual_norm\t{}\n", num(self.lambda), num(rnorm)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictJob {
    pub model: PathBuf,
    /// `auto`, `auto:N` or a CSV/text file of points.
    pub grid: String,
    pub out: PathBuf,
}

impl PredictJob {
    fn execute(&self) -> Result<Outcome> {
        let model = model::load_model(&self.model)?;
        let grid = io::resolve_grid(&self.grid, model.shape())?;
        let est = model.predict_many(grid.points())?;
        let mut header = vec!["grid_id".to_string()];
        header.extend(io::point_headers(grid.shape()));
        header.push("estimate".into());
        let rows = grid.points().iter().zip(&est).enumerate().map(|(i, (p, e))| {
            let mut row = vec![i.to_string()];
            row.extend(io::point_fields(p));
            row.push(num(*e));
            row
        });
        let path = io::write_csv(&self.out, &header, rows)?;
        Ok(Outcome { outputs: vec![path], summary: String::new() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandJob {
    pub model: PathBuf,
    pub grid: String,
    pub bootstrap: BootstrapConfig,
    pub out: PathBuf,
    /// Optional dump of the bootstrap statistics, one per line.
    pub draws_out: Option<PathBuf>,
}

/// Sidecar metadata written next to a band CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandMeta {
    pub critical_value: f64,
    pub alpha: f64,
    pub draws: usize,
    pub seed: u64,
    pub width_mode: WidthMode,
    pub variance_mode: VarianceMode,
    pub delta_expansion: f64,
    pub n: usize,
    /// H-norm radius `(1+δ) t̂/√n`, for `width_mode = hnorm`.
    pub hnorm_radius: Option<f64>,
}

impl BandJob {
    pub fn sidecar(&self) -> PathBuf {
        self.out.with_extension("json")
    }

    fn execute(&self) -> Result<Outcome> {
        let model = model::load_model(&self.model)?;
        let grid = io::resolve_grid(&self.grid, model.shape())?;
        let band = bootstrap::build_band(&model, &grid, &self.bootstrap)?;
        let header: Vec<String> = ["grid_id", "estimate", "sigma", "lower", "upper"].map(String::from).to_vec();
        let rows = (0..band.estimate.len()).map(|i| {
            vec![i.to_string(), num(band.estimate[i]), num(band.sigma[i]), num(band.lower[i]), num(band.upper[i])]
        });
        let mut outputs = vec![io::write_csv(&self.out, &header, rows)?];
        let meta = BandMeta {
            critical_value: band.critical_value,
            alpha: band.alpha,
            draws: band.draws,
            seed: band.seed,
            width_mode: band.width_mode,
            variance_mode: self.bootstrap.variance_mode.resolve(model.n()),
            delta_expansion: band.delta_expansion,
            n: band.n,
            hnorm_radius: (band.width_mode == WidthMode::Hnorm)
                .then(|| (1.0 + band.delta_expansion) * band.critical_value / (band.n as f64).sqrt()),
        };
        outputs.push(io::write_json(&self.sidecar(), &meta)?);
        if let Some(path) = &self.draws_out {
            outputs.push(io::write_lines(path, &band.stat_draws)?);
        }
        Ok(Outcome { outputs, summary: format!("critical_value\t{}\n", num(band.critical_value)) })
    }
}

// ---------------------------------------------------------------------------
// coverage / cdf
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageJob {
    pub scenario: Scenario,
    pub out_dir: PathBuf,
}

/// `metric, sup_true, sup_pseudo, h_true, h_pseudo` rows for coverage, bias and width.
pub fn coverage_table(report: &CoverageReport) -> (Vec<String>, Vec<Vec<String>>) {
    let header = ["metric", "sup_true", "sup_pseudo", "h_true", "h_pseudo"].map(String::from).to_vec();
    let row = |name: &str, v: [f64; 4]| {
        let mut r = vec![name.to_string()];
        r.extend(v.iter().map(|x| num(*x)));
        r
    };
    let rows = vec![
        row("coverage", [report.sup_true, report.sup_pseudo, report.h_true, report.h_pseudo]),
        // both bands are centred at f̂, so the bias does not depend on the norm
        row("bias", [report.bias_true, report.bias_pseudo, report.bias_true, report.bias_pseudo]),
        row("width", [report.width_sup_true, report.width_sup_pseudo, report.width_h_true, report.width_h_pseudo]),
    ];
    (header, rows)
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Metadata stored in `coverage.json`: the report without the per-replicate rows.
#[derive(Debug, Serialize)]
struct CoverageMeta<'a> {
    scenario: &'a Scenario,
    lambda: f64,
    grid_size: usize,
    sup_true: f64,
    sup_pseudo: f64,
    h_true: f64,
    h_pseudo: f64,
    bias_true: f64,
    bias_pseudo: f64,
    mae_true: f64,
    mae_pseudo: f64,
    width_sup: f64,
    width_h: f64,
}

/// Writes `coverage.csv`, `per_rep.csv` and `coverage.json` into `dir`.
pub fn write_coverage(dir: &Path, scenario: &Scenario, report: &CoverageReport) -> Result<Vec<PathBuf>> {
    let (header, rows) = coverage_table(report);
    let mut outputs = vec![io::write_csv(&dir.join("coverage.csv"), &header, rows)?];
    let rep_header = [
        "rep",
        "sup_true",
        "sup_pseudo",
        "h_true",
        "h_pseudo",
        "t_sup",
        "t_h",
        "width_sup",
        "width_h",
        "mae_true",
        "mae_pseudo",
        "mean_err_true",
        "mean_err_pseudo",
        "sup_err_true",
        "sup_err_pseudo",
        "h_err_true",
        "h_err_pseudo",
    ]
    .map(String::from)
    .to_vec();
    let flag = |b: bool| u8::from(b).to_string();
    let rep_rows = report.per_rep.iter().map(|r| {
        vec![
            r.rep.to_string(),
            flag(r.sup_true),
            flag(r.sup_pseudo),
            flag(r.h_true),
            flag(r.h_pseudo),
            num(r.t_sup),
            num(r.t_h),
            num(r.width_sup),
            num(r.width_h),
            num(r.mae_true),
            num(r.mae_pseudo),
            num(r.mean_err_true),
            num(r.mean_err_pseudo),
            num(r.sup_err_true),
            num(r.sup_err_pseudo),
            opt_num(r.h_err_true),
            num(r.h_err_pseudo),
        ]
    });
    outputs.push(io::write_csv(&dir.join("per_rep.csv"), &rep_header, rep_rows)?);
    let meta = CoverageMeta {
        scenario,
        lambda: report.lambda,
        grid_size: report.grid_size,
        sup_true: report.sup_true,
        sup_pseudo: report.sup_pseudo,
        h_true: report.h_true,
        h_pseudo: report.h_pseudo,
        bias_true: report.bias_true,
        bias_pseudo: report.bias_pseudo,
        mae_true: report.mae_true,
        mae_pseudo: report.mae_pseudo,
        width_sup: report.width_sup_true,
        width_h: report.width_h_true,
    };
    outputs.push(io::write_json(&dir.join("coverage.json"), &meta)?);
    Ok(outputs)
}

impl CoverageJob {
    fn execute(&self) -> Result<Outcome> {
        let report = simulation::run_coverage(&self.scenario)?;
        let outputs = write_coverage(&self.out_dir, &self.scenario, &report)?;
        let summary = format!(
            "scenario\t{}\nn\t{}\nreps\t{}\nsup_true\t{}\nsup_pseudo\t{}\nh_true\t{}\nh_pseudo\t{}\n",
            report.scenario,
            report.n,
            report.reps,
            num(report.sup_true),
            num(report.sup_pseudo),
            num(report.h_true),
            num(report.h_pseudo)
        );
        Ok(Outcome { outputs, summary })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfJob {
    pub scenario: Scenario,
    pub target: CdfTarget,
    pub out_dir: PathBuf,
}

impl CdfJob {
    fn execute(&self) -> Result<Outcome> {
        let cmp = simulation::cdf_compare(&self.scenario, self.target)?;
        let header = ["source", "index", "value"].map(String::from).to_vec();
        let rows =
            cmp.estimator.iter().enumerate().map(|(i, v)| vec!["estimator".to_string(), i.to_string(), num(*v)]).chain(
                cmp.bootstrap.iter().enumerate().map(|(i, v)| vec!["bootstrap".to_string(), i.to_string(), num(*v)]),
            );
        let mut outputs = vec![io::write_csv(&self.out_dir.join("cdf.csv"), &header, rows)?];
        let meta = serde_json::json!({ "scenario": &self.scenario, "target": cmp.target, "ks": cmp.ks });
        outputs.push(io::write_json(&self.out_dir.join("cdf.json"), &meta)?);
        Ok(Outcome { outputs, summary: format!("ks\t{}\n", num(cmp.ks)) })
    }
}

// ---------------------------------------------------------------------------
// spectrum
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectrumSource {
    /// A precomputed Gram matrix; `n` defaults to its dimension.
    Gram { path: PathBuf },
    /// Inputs read from a data or points file, with a resolved kernel.
    Points { path: PathBuf, spec: KernelSpec },
    /// Preferences drawn from the synthetic school-choice market.
    Market { market: MarketConfig, rep: usize, convention: MallowsConvention },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumJob {
    pub source: SpectrumSource,
    /// Compute only the leading eigenvalues (subspace iteration) instead of the full spectrum.
    pub top: Option<usize>,
    pub lambdas: Vec<f64>,
    /// Seeds the subspace iteration when `top` is set.
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Serialize)]
struct SpectrumMeta {
    n: usize,
    trace: f64,
    /// Whether only the leading eigenvalues were computed.
    partial: bool,
    negative_count: Option<usize>,
    eff_dim: Vec<(f64, f64)>,
    spec: Option<KernelSpec>,
    decay: Option<DecayFit>,
}

impl SpectrumJob {
    fn gram(&self) -> Result<(nalgebra::DMatrix<f64>, Option<KernelSpec>)> {
        match &self.source {
            SpectrumSource::Gram { path } => Ok((io::read_matrix(path)?, None)),
            SpectrumSource::Points { path, spec } => {
                let xs = io::read_points(path)?;
                Ok((kernels::gram_matrix(spec, &xs)?, Some(*spec)))
            }
            SpectrumSource::Market { market, rep, convention } => {
                let prefs = school_choice::sample_preferences(market, *rep)?;
                let xs: Vec<InputPoint> = prefs.into_iter().map(InputPoint::Ranking).collect();
                let ell = kernels::median_heuristic(&xs)?.mallows_lengthscale(*convention);
                let spec = KernelSpec::mallows(ell)?;
                Ok((kernels::gram_matrix(&spec, &xs)?, Some(spec)))
            }
        }
    }

    fn execute(&self) -> Result<Outcome> {
        let (gram, spec) = self.gram()?;
        let n = gram.nrows();
        let (eigenvalues, tails, trace, meta) = match self.top {
            None => {
                let report = spectral::spectrum_with_lambdas(&gram, n, &self.lambdas)?;
                let decay = spectral::decay_fit(&report.eigenvalues).ok();
                let meta = SpectrumMeta {
                    n,
                    trace: report.trace,
                    partial: false,
                    negative_count: Some(report.negative_count),
                    eff_dim: report.eff_dim.clone(),
                    spec,
                    decay,
                };
                (report.eigenvalues, report.tail_sums, report.trace, meta)
            }
            Some(k) => {
                let part = spectral::top_spectrum(&gram, n, k, self.seed)?;
                let mut tails = Vec::with_capacity(k + 1);
                let mut head = 0.0;
                tails.push(part.trace);
                for v in &part.eigenvalues {
                    head += v.max(0.0);
                    tails.push((part.trace - head).max(0.0));
                }
                let decay = spectral::decay_fit(&part.eigenvalues).ok();
                let meta = SpectrumMeta {
                    n,
                    trace: part.trace,
                    partial: true,
                    negative_count: None,
                    eff_dim: Vec::new(),
                    spec,
                    decay,
                };
                (part.eigenvalues, tails, part.trace, meta)
            }
        };
        let header = ["index", "eigenvalue", "local_width", "tail_mass"].map(String::from).to_vec();
        let rows = eigenvalues.iter().enumerate().map(|(i, v)| {
            let tail = tails[i + 1];
            let mass = if trace > 0.0 { tail / trace } else { 0.0 };
            vec![(i + 1).to_string(), num(*v), num(tail.sqrt()), num(mass)]
        });
        let mut outputs = vec![io::write_csv(&self.out_dir.join("spectrum.csv"), &header, rows)?];
        outputs.push(io::write_json(&self.out_dir.join("spectrum.json"), &meta)?);
        let shown = eigenvalues.len().min(25);
        let mass = if trace > 0.0 { tails[shown] / trace } else { 0.0 };
        Ok(Outcome { outputs, summary: format!("n\t{n}\ntrace\t{}\ntail_mass_{shown}\t{}\n", num(trace), num(mass)) })
    }
}

// ---------------------------------------------------------------------------
// match
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchJob {
    pub market: MarketConfig,
    pub reps: usize,
    pub out_dir: PathBuf,
}

#[derive(Debug, Serialize)]
struct MatchSummary<'a> {
    market: &'a MarketConfig,
    reps: usize,
    /// Share of replicates whose intervals all cover the stratum truths.
    coverage: f64,
    /// Share of replicates whose ρ = 1 interval excludes zero.
    reject_rho1: f64,
    runs: Vec<RunSummary>,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    rep: usize,
    lambda: f64,
    lengthscale: f64,
    critical_value: f64,
    in_sample: usize,
    covers_truth: bool,
    rejects_rho1: bool,
}

/// Writes strata, assignment and propensity tables for a batch of runs.
pub fn write_match(dir: &Path, market: &MarketConfig, runs: &[MatchRun]) -> Result<Vec<PathBuf>> {
    let header = ["rep", "rho", "count", "estimate", "lower", "upper", "truth", "omitted"].map(String::from).to_vec();
    let rows = runs.iter().flat_map(|run| {
        run.strata.rows.iter().map(move |r| {
            vec![
                run.rep.to_string(),
                r.rho.to_string(),
                r.count.to_string(),
                num(r.estimate),
                num(r.lower),
                num(r.upper),
                opt_num(r.truth),
                u8::from(r.omitted).to_string(),
            ]
        })
    });
    let mut outputs = vec![io::write_csv(&dir.join("strata.csv"), &header, rows)?];

    let header = ["rep", "student", "ranking", "rho", "school", "treated", "outcome", "ipw_outcome", "in_sample"]
        .map(String::from)
        .to_vec();
    let rows = runs.iter().flat_map(|run| {
        run.students.iter().enumerate().map(move |(i, s)| {
            vec![
                run.rep.to_string(),
                i.to_string(),
                s.ranking.to_string(),
                s.rho.to_string(),
                s.school.to_string(),
                u8::from(s.treated).to_string(),
                num(s.outcome),
                num(s.ipw_outcome),
                u8::from(s.in_sample).to_string(),
            ]
        })
    });
    outputs.push(io::write_csv(&dir.join("assignment.csv"), &header, rows)?);

    let header = ["rep", "student", "propensity"].map(String::from).to_vec();
    let rows = runs.iter().flat_map(|run| {
        run.students.iter().enumerate().map(move |(i, s)| vec![run.rep.to_string(), i.to_string(), num(s.propensity)])
    });
    outputs.push(io::write_csv(&dir.join("propensity.csv"), &header, rows)?);

    let n = runs.len().max(1) as f64;
    let summary = MatchSummary {
        market,
        reps: runs.len(),
        coverage: runs.iter().filter(|r| r.strata.covers_truth()).count() as f64 / n,
        reject_rho1: runs.iter().filter(|r| r.rejects_zero(1)).count() as f64 / n,
        runs: runs
            .iter()
            .map(|r| RunSummary {
                rep: r.rep,
                lambda: r.lambda,
                lengthscale: r.lengthscale,
                critical_value: r.strata.critical_value,
                in_sample: r.students.iter().filter(|s| s.in_sample).count(),
                covers_truth: r.strata.covers_truth(),
                rejects_rho1: r.rejects_zero(1),
            })
            .collect(),
    };
    outputs.push(io::write_json(&dir.join("summary.json"), &summary)?);
    Ok(outputs)
}

impl MatchJob {
    fn execute(&self) -> Result<Outcome> {
        if self.reps == 0 {
            return Err(CliError::config("reps must be ≥ 1"));
        }
        self.market.validate()?;
        let truth = school_choice::market_truth(&self.market)?;
        let runs = parallel::try_map_indexed(self.reps, |rep| {
            school_choice::run_match_experiment_with_truth(&self.market, rep, &truth)
        })?;
        let outputs = write_match(&self.out_dir, &self.market, &runs)?;
        let n = runs.len() as f64;
        let covered = runs.iter().filter(|r| r.strata.covers_truth()).count() as f64 / n;
        let rejected = runs.iter().filter(|r| r.rejects_zero(1)).count() as f64 / n;
        Ok(Outcome {
            outputs,
            summary: format!(
                "scenario\t{}\nreps\t{}\ncoverage\t{}\nreject_rho1\t{}\n",
                self.market.scenario,
                self.reps,
                num(covered),
                num(rejected)
            ),
        })
    }
}
