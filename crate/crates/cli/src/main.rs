//! `quantgam` command-line interface.
//!
//! Exit codes: 0 success, 2 usage or parse error, 3 data error, 4 numerical failure.

#![allow(clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quantgam::calibrate::CalibrationOptions;
use quantgam::data::{ingest_csv, Dataset, Ingested, SchemaHints};
use quantgam::formula::parse_formula;
use quantgam::model::{check, fit_multi, pinball_score, predict, term_effect, CheckReport, FitOptions};
use quantgam::persist::{write_atomic, FitFailure, ModelFile, Provenance};
use quantgam::simulate::{simulate, Preset};
use quantgam::Error;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Parser)]
#[command(name = "quantgam", version, about = "Fit and use quantile generalized additive models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one or more quantiles and save them to a model file.
    Fit(FitArgs),
    /// Predict fitted quantiles with interval bounds.
    Predict(PredictArgs),
    /// Diagnose fitted quantiles and emit plot data.
    Check(CheckArgs),
    /// Emit the fitted curve of a smooth term.
    Effects(EffectsArgs),
    /// Total pinball loss on a data set.
    Score(ScoreArgs),
    /// Write a synthetic data set.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    formula: String,
    #[arg(long)]
    data: PathBuf,
    /// Strictly increasing quantile levels, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    qu: Vec<f64>,
    /// Upper bound on the smoothing bias; the bandwidth is automatic when absent.
    #[arg(long)]
    err: Option<f64>,
    /// Columns to read as factors, comma separated.
    #[arg(long, value_delimiter = ',')]
    factors: Vec<String>,
    /// Matrix groups as `prefix=width`, comma separated.
    #[arg(long, value_delimiter = ',')]
    matrix: Vec<String>,
    /// Initial calibration bracket in log sigma0, as `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    bracket: Option<Vec<f64>>,
    /// Calibration tolerance in log sigma0.
    #[arg(long, default_value_t = CalibrationOptions::default().tol)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Coverage of the interval `fit +- z * se`.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Use the sandwich covariance for standard errors.
    #[arg(long)]
    sandwich: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
    /// Plot data CSV; defaults to the report path with a `.plot.csv` suffix.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct EffectsArgs {
    #[arg(long)]
    model: PathBuf,
    /// Term name such as `s(x)`, or its covariate.
    #[arg(long)]
    term: String,
    /// Grid size.
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// One of appendixA, heteroNormal, sine.
    #[arg(long)]
    preset: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::Parse(_) | Error::InvalidArgument(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::ZeroVariance(_) => 3,
            _ => 4,
        };
        Self { code, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Check(a) => cmd_check(a),
        Command::Effects(a) => cmd_effects(a),
        Command::Score(a) => cmd_score(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn parse_groups(items: &[String]) -> Result<BTreeMap<String, usize>, Failure> {
    items
        .iter()
        .map(|item| {
            let (name, width) =
                item.split_once('=').ok_or_else(|| Failure::usage(format!("matrix group `{item}` is not `prefix=width`")))?;
            let width: usize = width
                .trim()
                .parse()
                .ok()
                .filter(|&w| w > 0)
                .ok_or_else(|| Failure::usage(format!("matrix group `{item}` needs a positive width")))?;
            Ok((name.trim().to_string(), width))
        })
        .collect()
}

fn ingest(path: &Path, schema: &SchemaHints, used: BTreeSet<String>) -> Result<Ingested, Failure> {
    let hints = SchemaHints { used: Some(used), ..schema.clone() };
    ingest_csv(path, &hints).map_err(|e| Failure { code: 3, message: format!("{}: {e}", path.display()) })
}

fn load_model(path: &Path) -> Result<ModelFile, Failure> {
    ModelFile::load(path).map_err(|e| Failure { code: 3, message: format!("{}: {e}", path.display()) })
}

/// Columns needed to evaluate every model's quantile design.
fn design_variables(file: &ModelFile) -> BTreeSet<String> {
    file.models.iter().flat_map(|m| m.design.variables()).collect()
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> CmdResult {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Failure { code: 3, message: e.to_string() })?;
    }
    let bytes = w.into_inner().map_err(|e| Failure { code: 3, message: e.to_string() })?;
    Ok(write_atomic(path, &bytes)?)
}

fn z_for(level: f64) -> Result<f64, Failure> {
    if !(0.0..1.0).contains(&level) {
        return Err(Failure::usage(format!("level {level} is outside [0, 1)")));
    }
    Ok(if level == 0.0 { 0.0 } else { Normal::standard().inverse_cdf(0.5 + 0.5 * level) })
}

fn cmd_fit(a: FitArgs) -> CmdResult {
    let spec = parse_formula(&a.formula).map_err(|e| Failure::usage(format!("formula: {e}")))?;
    if a.qu.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Failure::usage("--qu levels must be strictly increasing"));
    }
    let schema = SchemaHints {
        factors: a.factors.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        matrix_groups: parse_groups(&a.matrix)?,
        used: None,
    };
    let ingested = ingest(&a.data, &schema, spec.variables())?;
    let bracket = a.bracket.map(|b| (b[0], b[1]));
    let options = FitOptions { err: a.err, calibration: CalibrationOptions { bracket, tol: a.tol, ..Default::default() } };
    let results = fit_multi(&spec, &ingested.data, &a.qu, &options)?;

    let mut models = Vec::new();
    let mut failures = Vec::new();
    let mut first_error: Option<Failure> = None;
    println!("{:>6}  {:<14} {:>12} {:>10} {:>8} {:>12}  calibration", "tau", "status", "sigma0", "lambda", "edf", "laml");
    for (&tau, res) in a.qu.iter().zip(results) {
        match res {
            Ok(m) => {
                let status = if m.converged() { "converged" } else { "not converged" };
                let calib = match (m.calibration.boundary, m.calibration.discontinuity) {
                    (true, _) => "at bracket edge",
                    (false, true) => "discontinuous",
                    _ => "ok",
                };
                println!(
                    "{tau:>6.3}  {status:<14} {:>12.5e} {:>10.4} {:>8.2} {:>12.4}  {calib}",
                    m.sigma0, m.lambda, m.edf_total, m.laml
                );
                models.push(m);
            }
            Err(e) => {
                println!("{tau:>6.3}  {:<14} {e}", "failed");
                failures.push(FitFailure { tau, error: e.to_string() });
                first_error.get_or_insert(Failure::from(e));
            }
        }
    }
    if models.is_empty() {
        return Err(first_error.unwrap_or_else(|| Failure::numerical("no quantile was fitted")));
    }
    let checks: Vec<CheckReport> = models.iter().map(|m| check(m, &ingested.data)).collect::<Result<_, _>>()?;
    let all_converged = failures.is_empty() && models.iter().all(|m| m.converged());
    let provenance = Provenance {
        tool: "quantgam".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        options,
        data_fingerprint: ingested.fingerprint,
        n_rows: ingested.data.n(),
        schema,
    };
    ModelFile::new(spec.render(), models, failures, checks, provenance).save(&a.out)?;
    match first_error {
        Some(e) => Err(e),
        None if !all_converged => Err(Failure::numerical("some fits did not converge")),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct PredictionRow {
    row_id: usize,
    tau: f64,
    fit: f64,
    se: f64,
    lo: f64,
    hi: f64,
    clamped_flag: u8,
}

fn cmd_predict(a: PredictArgs) -> CmdResult {
    let z = z_for(a.level)?;
    let file = load_model(&a.model)?;
    let ingested = ingest(&a.data, &file.provenance.schema, design_variables(&file))?;
    let mut rows = Vec::new();
    for m in &file.models {
        let p = predict(m, &ingested.data, true, a.sandwich)?;
        let se = p.se.unwrap_or_default();
        for i in 0..p.fit.len() {
            rows.push(PredictionRow {
                row_id: i + 1,
                tau: m.tau,
                fit: p.fit[i],
                se: se[i],
                lo: p.fit[i] - z * se[i],
                hi: p.fit[i] + z * se[i],
                clamped_flag: u8::from(p.clamped[i]),
            });
        }
    }
    write_csv(&a.out, rows)
}

#[derive(Serialize)]
struct CheckOutput<'a> {
    data_fingerprint: &'a str,
    matches_training_data: bool,
    reports: Vec<TauReport<'a>>,
}

#[derive(Serialize)]
struct TauReport<'a> {
    tau: f64,
    report: &'a CheckReport,
}

#[derive(Serialize)]
struct PlotRow {
    series: &'static str,
    tau: f64,
    x: f64,
    y: Option<f64>,
    lo: Option<f64>,
    hi: Option<f64>,
}

fn check_text(m: &quantgam::model::FittedQuantileModel, r: &CheckReport) -> String {
    let mut s = String::new();
    let yes = |b: bool| if b { "yes" } else { "no" };
    let _ = writeln!(s, "tau = {}", m.tau);
    let _ = writeln!(
        s,
        "Theor. proportion of neg. resid.: {:.3}   Actual proportion: {:.3}",
        r.theor_prop_neg, r.actual_prop_neg
    );
    let _ = writeln!(
        s,
        "Integrated absolute bias |F(mu) - F(mu0)| = {:.6} (bound {:.6})",
        r.integrated_abs_bias, r.bias_bound
    );
    let _ = writeln!(s, "Mean |F(mu_hat) - tau| under the preliminary model: {:.6}", r.fit_abs_deviation);
    let _ = writeln!(
        s,
        "Method: LAML   Outer iterations: {}   Converged: {}",
        m.convergence.outer_iterations,
        yes(m.convergence.laml_converged)
    );
    if let (Some(lo), Some(hi)) = (r.laml.gradient_min, r.laml.gradient_max) {
        let _ = writeln!(s, "Gradient range [{lo:.3e}, {hi:.3e}]");
    }
    let _ = writeln!(s, "Hessian positive definite: {}", yes(r.laml.hessian_pd));
    let _ = writeln!(s, "Model rank = {} / {}", r.laml.model_rank, r.laml.n_coefficients);
    let _ = writeln!(s, "Basis dimension (k') and effective degrees of freedom (edf):");
    for t in &r.edf_vs_kprime {
        let _ = writeln!(s, "  {:<24} k' = {:<4} edf = {:.2}", t.name, t.k_prime, t.edf);
    }
    if r.calibration_boundary {
        let _ = writeln!(s, "Warning: calibration minimum at the edge of the search bracket");
    }
    if r.calibration_discontinuity {
        let _ = writeln!(s, "Warning: calibration loss looks discontinuous");
    }
    s
}

fn cmd_check(a: CheckArgs) -> CmdResult {
    let file = load_model(&a.model)?;
    let mut used = design_variables(&file);
    for m in &file.models {
        used.insert(m.spec.response.clone());
        used.extend(m.spec.variables());
    }
    let ingested = ingest(&a.data, &file.provenance.schema, used)?;
    let matches = ingested.fingerprint == file.provenance.data_fingerprint;
    if !matches {
        eprintln!("warning: data differ from the training data recorded in the model file");
    }
    let reports: Vec<CheckReport> = file.models.iter().map(|m| check(m, &ingested.data)).collect::<Result<_, _>>()?;
    let mut plot = Vec::new();
    for (m, r) in file.models.iter().zip(&reports) {
        print!("{}", check_text(m, r));
        println!();
        for (b, bin) in r.binned.iter().enumerate() {
            plot.push(PlotRow {
                series: "binned_proportion",
                tau: m.tau,
                x: (b + 1) as f64,
                y: Some(bin.proportion),
                lo: Some(bin.lo),
                hi: Some(bin.hi),
            });
        }
        for p in &m.calibration.evaluations {
            plot.push(PlotRow { series: "calibration", tau: m.tau, x: p.log_sigma0, y: p.ikl, lo: None, hi: None });
        }
        for h in &r.bias_histogram {
            plot.push(PlotRow {
                series: "bias_histogram",
                tau: m.tau,
                x: 0.5 * (h.lo + h.hi),
                y: Some(h.count as f64),
                lo: Some(h.lo),
                hi: Some(h.hi),
            });
        }
    }
    let out = CheckOutput {
        data_fingerprint: &ingested.fingerprint,
        matches_training_data: matches,
        reports: file.models.iter().zip(&reports).map(|(m, report)| TauReport { tau: m.tau, report }).collect(),
    };
    let json = serde_json::to_string_pretty(&out).map_err(|e| Failure::numerical(e.to_string()))?;
    write_atomic(&a.out, json.as_bytes())?;
    let plot_path = a.plot.unwrap_or_else(|| a.out.with_extension("plot.csv"));
    write_csv(&plot_path, plot)
}

#[derive(Serialize)]
struct EffectRow {
    tau: f64,
    x: f64,
    effect: f64,
    se: f64,
    lo: f64,
    hi: f64,
}

fn cmd_effects(a: EffectsArgs) -> CmdResult {
    let z = z_for(a.level)?;
    let file = load_model(&a.model)?;
    let mut rows = Vec::new();
    for m in &file.models {
        let e = term_effect(m, &a.term, a.n)?;
        for i in 0..e.x.len() {
            rows.push(EffectRow {
                tau: m.tau,
                x: e.x[i],
                effect: e.effect[i],
                se: e.se[i],
                lo: e.effect[i] - z * e.se[i],
                hi: e.effect[i] + z * e.se[i],
            });
        }
    }
    write_csv(&a.out, rows)
}

#[derive(Serialize)]
struct ScoreRow {
    tau: f64,
    n: usize,
    pinball: f64,
}

fn cmd_score(a: ScoreArgs) -> CmdResult {
    let file = load_model(&a.model)?;
    let response = file.models.first().map(|m| m.spec.response.clone()).unwrap_or_default();
    let mut used = design_variables(&file);
    used.insert(response.clone());
    let ingested = ingest(&a.data, &file.provenance.schema, used)?;
    let y = ingested.data.scalar(&response)?;
    let preds = file.models.iter().map(|m| Ok(predict(m, &ingested.data, false, false)?.fit)).collect::<Result<Vec<_>, Error>>()?;
    let taus: Vec<f64> = file.models.iter().map(|m| m.tau).collect();
    let totals = pinball_score(y, &preds, &taus)?;
    let rows: Vec<ScoreRow> = taus.iter().zip(&totals).map(|(&tau, &pinball)| ScoreRow { tau, n: y.len(), pinball }).collect();
    for r in &rows {
        println!("tau {:.3}: pinball loss {:.6} over {} rows", r.tau, r.pinball, r.n);
    }
    write_csv(&a.out, rows)
}

#[derive(Serialize)]
struct SimRow {
    x: f64,
    y: f64,
}

fn cmd_simulate(a: SimulateArgs) -> CmdResult {
    let preset: Preset = a.preset.parse()?;
    let data: Dataset = simulate(preset, a.n, a.seed)?;
    let (x, y) = (data.scalar("x")?, data.scalar("y")?);
    write_csv(&a.out, x.iter().zip(y).map(|(&x, &y)| SimRow { x, y }))
}
