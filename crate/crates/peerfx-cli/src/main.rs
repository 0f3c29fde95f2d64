//! Command line surface for the peerfx library: simulate datasets, fit
//! estimators, run Monte Carlo comparisons, and check identification.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use peerfx::estimators::{
    fit_cmle, fit_graham_cv, fit_qmle, CvVariant, Estimate, FitOptions, ThetaBounds,
};
use peerfx::mc::{run_mc, EstimatorKind, McConfig, McRun, TableFormat};
use peerfx::model::{check_identification, dataset_from_csv_path, Dataset, IngestOptions};
use peerfx::simulate::{derive_seed, gen_sample_split, Design};
use peerfx::Error as PxError;

/// Schema version stamped into every JSON output.
const SPEC_VERSION: &str = "1";

const EXIT_SCHEMA: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_IDENT: u8 = 4;
const EXIT_NONCONV: u8 = 5;

#[derive(Parser)]
#[command(
    name = "peerfx",
    about = "Peer effects estimation with random group effects: QMLE, conditional MLE and conditional-variance estimators, with a Monte Carlo harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Qmle,
    Cmle,
    Cv,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Markdown,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset CSV (plus a truth sidecar) from a design config
    Simulate {
        /// JSON run configuration (keys: design, estimators, fit, reps, seed, output)
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit one estimator to a dataset CSV and write a JSON result
    Estimate {
        /// Input CSV (columns: group, category, y, x1_*, x2_*, x3_*)
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        estimator: EstimatorArg,
        /// Number of categories (inferred from the data when omitted)
        #[arg(long = "J")]
        j_categories: Option<usize>,
        /// Output JSON path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fit even when no identification scenario holds
        #[arg(long)]
        force: bool,
        /// Seed for optimizer restarts
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run Monte Carlo replications of a design and summarize estimators
    Mc {
        #[arg(long)]
        config: PathBuf,
        /// Output table path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the replication count
        #[arg(long)]
        reps: Option<usize>,
        /// Override the master seed
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: logical cores)
        #[arg(long)]
        threads: Option<usize>,
        /// Write per-replication estimates to this CSV
        #[arg(long)]
        dump_reps: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "markdown")]
        format: FormatArg,
    },
    /// Print the group size/category table and identification scenarios
    Identify {
        #[arg(long)]
        data: PathBuf,
    },
}

/// Fit options as they appear in the JSON config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FitConfig {
    max_iter: usize,
    grad_tol: f64,
    multistart: usize,
    seed: u64,
    lambda_bounds: (f64, f64),
    sigma_eps2_bounds: (f64, f64),
    sigma_alpha2_max: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let opts = FitOptions::default();
        Self {
            max_iter: opts.max_iter,
            grad_tol: opts.grad_tol,
            multistart: opts.multistart,
            seed: opts.seed,
            lambda_bounds: opts.bounds.lambda,
            sigma_eps2_bounds: opts.bounds.sigma_eps2,
            sigma_alpha2_max: opts.bounds.sigma_alpha2_max,
        }
    }
}

impl FitConfig {
    fn to_options(&self) -> FitOptions {
        FitOptions {
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            multistart: self.multistart,
            seed: self.seed,
            bounds: ThetaBounds {
                lambda: self.lambda_bounds,
                sigma_alpha2_max: self.sigma_alpha2_max,
                sigma_eps2: self.sigma_eps2_bounds,
            },
            allow_unidentified: false,
        }
    }
}

fn default_estimators() -> Vec<String> {
    vec!["qmle".to_string()]
}
fn default_reps() -> usize {
    1000
}
fn default_seed() -> u64 {
    20_240_101
}

/// Top-level run configuration; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    design: Design,
    #[serde(default = "default_estimators")]
    estimators: Vec<String>,
    #[serde(default)]
    fit: FitConfig,
    #[serde(default = "default_reps")]
    reps: usize,
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default)]
    output: Option<String>,
}

/// An error paired with the exit code contract.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

fn classify(err: PxError) -> CliError {
    let code = match &err {
        PxError::Identification(_) | PxError::WeakIdentification(_) => EXIT_IDENT,
        PxError::NonConvergence { .. } => EXIT_NONCONV,
        PxError::Io(_) => EXIT_IO,
        PxError::Parse { .. } | PxError::Csv(_) | PxError::Design(_) => EXIT_SCHEMA,
        _ => 1,
    };
    CliError::new(code, err.to_string())
}

fn read_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(EXIT_IO, format!("cannot read {}: {e}", path.display())))?;
    let config: RunConfig = serde_json::from_str(&text).map_err(|e| {
        CliError::new(
            EXIT_SCHEMA,
            format!("invalid config {}: {e}", path.display()),
        )
    })?;
    config.design.validate().map_err(classify)?;
    Ok(config)
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text)
            .map_err(|e| CliError::new(EXIT_IO, format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            std::io::stdout().flush().ok();
            Ok(())
        }
    }
}

fn cmd_simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = read_config(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let sample = gen_sample_split(&cfg.design, derive_seed(seed, 1), derive_seed(seed, 2))
        .map_err(classify)?;

    let mut csv = String::from("group,category,y,x1_1,x2_1,x3_1\n");
    for r in &sample.records {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.group, r.category, r.y, r.x1[0], r.x2[0], r.x3[0]
        ));
    }
    write_text(Some(out), &csv)?;

    let truth = &sample.truth;
    let sidecar = serde_json::json!({
        "spec_version": SPEC_VERSION,
        "design": cfg.design,
        "seed": seed,
        "truth": {
            "lambda": truth.theta.lambda,
            "sigma_alpha2": truth.theta.sigma_alpha2,
            "sigma_eps2": truth.theta.sigma_eps2,
            "beta": truth.beta.as_slice(),
        },
    });
    let sidecar_path = out.with_extension("truth.json");
    write_text(
        Some(&sidecar_path),
        &format!("{}\n", serde_json::to_string_pretty(&sidecar).unwrap()),
    )?;
    eprintln!(
        "wrote {} rows to {} (truth in {})",
        sample.records.len(),
        out.display(),
        sidecar_path.display()
    );
    Ok(())
}

fn load_dataset(data: &Path, j_categories: Option<usize>) -> Result<Dataset, CliError> {
    let opts = IngestOptions {
        j_categories,
        ..Default::default()
    };
    dataset_from_csv_path(data, &opts).map_err(|e| match e {
        PxError::Io(io) => CliError::new(EXIT_IO, format!("cannot read {}: {io}", data.display())),
        other => classify(other),
    })
}

fn estimate_json(est: &Estimate, estimator: &str, d: &Dataset) -> serde_json::Value {
    let report = check_identification(d);
    let k = est.values.len();
    let vcov: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| est.vcov[(i, j)]).collect())
        .collect();
    serde_json::json!({
        "spec_version": SPEC_VERSION,
        "estimator": estimator,
        "parameters": est.names,
        "estimates": est.values.as_slice(),
        "std_errors": est.std_err.as_slice(),
        "vcov": vcov,
        "loglik": est.loglik,
        "converged": est.converged,
        "iterations": est.iterations,
        "boundary_sigma_alpha": est.boundary_sigma_alpha,
        "identification": {
            "scenario_a": report.scenario_a,
            "scenario_b": report.scenario_b,
            "identified": report.identified,
            "groups_by_size_category": report
                .sizes_by_category
                .iter()
                .map(|(&(m, j), &c)| serde_json::json!({"m": m, "category": j, "groups": c}))
                .collect::<Vec<_>>(),
        },
        "warnings": est.warnings,
    })
}

fn cmd_estimate(
    data: &Path,
    estimator: EstimatorArg,
    j_categories: Option<usize>,
    out: Option<&Path>,
    force: bool,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let d = load_dataset(data, j_categories)?;
    let mut opts = FitOptions {
        allow_unidentified: force,
        ..Default::default()
    };
    if let Some(s) = seed {
        opts.seed = s;
    }

    let json = match estimator {
        EstimatorArg::Qmle => match fit_qmle(&d, &opts) {
            Ok(est) => estimate_json(&est, "qmle", &d),
            Err(PxError::NonConvergence { best, starts, .. }) => {
                // the best iterate still goes to the output, with exit code 5
                let mut v = estimate_json(&best, "qmle", &d);
                v["error"] = serde_json::json!(format!(
                    "optimizer did not converge after {starts} start(s)"
                ));
                let text = format!("{}\n", serde_json::to_string_pretty(&v).unwrap());
                write_text(out, &text)?;
                return Err(CliError::new(
                    EXIT_NONCONV,
                    "optimizer did not converge; best iterate written to output",
                ));
            }
            Err(e) => return Err(classify(e)),
        },
        EstimatorArg::Cmle => {
            let report = check_identification(&d);
            if !report.scenario_a && !force {
                return Err(CliError::new(
                    EXIT_IDENT,
                    "the within estimator needs size variation (scenario a); pass --force to fit anyway",
                ));
            }
            let est = fit_cmle(&d, &opts).map_err(classify)?;
            estimate_json(&est, "cmle", &d)
        }
        EstimatorArg::Cv => {
            let cv = fit_graham_cv(&d, CvVariant::LeaveOutMean).map_err(classify)?;
            serde_json::json!({
                "spec_version": SPEC_VERSION,
                "estimator": "cv",
                "parameters": ["lambda", "sigma_alpha2"],
                "estimates": [cv.lambda, cv.sigma_alpha2],
                "warnings": [],
            })
        }
    };
    write_text(
        out,
        &format!("{}\n", serde_json::to_string_pretty(&json).unwrap()),
    )
}

fn dump_reps_csv(run: &McRun) -> String {
    let mut out =
        String::from("rep,estimator,converged,boundary,parameter,estimate,std_err,reject05\n");
    for rep in &run.raw {
        for fit in &rep.fits {
            for p in &fit.params {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    rep.rep,
                    fit.estimator.label(),
                    fit.converged,
                    fit.boundary,
                    p.name,
                    p.estimate,
                    p.std_err.map(|s| s.to_string()).unwrap_or_default(),
                    p.reject05.map(|r| r.to_string()).unwrap_or_default(),
                ));
            }
        }
    }
    out
}

fn cmd_mc(
    config: &Path,
    out: Option<&Path>,
    reps: Option<usize>,
    seed: Option<u64>,
    threads: Option<usize>,
    dump: Option<&Path>,
    format: FormatArg,
) -> Result<(), CliError> {
    let cfg = read_config(config)?;
    let reps = reps.unwrap_or(cfg.reps);
    if reps == 0 {
        return Err(CliError::new(EXIT_SCHEMA, "reps must be >= 1"));
    }
    let estimators: Vec<EstimatorKind> = cfg
        .estimators
        .iter()
        .map(|s| s.parse::<EstimatorKind>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::new(EXIT_SCHEMA, e.to_string()))?;

    let mc_cfg = McConfig {
        reps,
        master_seed: seed.unwrap_or(cfg.seed),
        threads: threads.unwrap_or(0),
        fit: cfg.fit.to_options(),
    };
    let run = run_mc(&cfg.design, &estimators, &mc_cfg).map_err(classify)?;

    let table_format = match format {
        FormatArg::Markdown => TableFormat::Markdown,
        FormatArg::Csv => TableFormat::Csv,
    };
    let table = peerfx::mc::emit_table(&run.summaries, table_format);
    let out = out
        .map(PathBuf::from)
        .or_else(|| cfg.output.as_ref().map(PathBuf::from));
    write_text(out.as_deref(), &table)?;
    if let Some(dump_path) = dump {
        write_text(Some(dump_path), &dump_reps_csv(&run))?;
    }
    Ok(())
}

fn cmd_identify(data: &Path) -> Result<bool, CliError> {
    let d = load_dataset(data, None)?;
    let report = check_identification(&d);
    println!("{report}");
    Ok(report.identified)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { config, out, seed } => cmd_simulate(config, out, *seed),
        Command::Estimate {
            data,
            estimator,
            j_categories,
            out,
            force,
            seed,
        } => cmd_estimate(
            data,
            *estimator,
            *j_categories,
            out.as_deref(),
            *force,
            *seed,
        ),
        Command::Mc {
            config,
            out,
            reps,
            seed,
            threads,
            dump_reps,
            format,
        } => cmd_mc(
            config,
            out.as_deref(),
            *reps,
            *seed,
            *threads,
            dump_reps.as_deref(),
            *format,
        ),
        Command::Identify { data } => {
            return match cmd_identify(data) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(1),
                Err(e) => {
                    eprintln!("error: {}", e.message);
                    ExitCode::from(e.code)
                }
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
