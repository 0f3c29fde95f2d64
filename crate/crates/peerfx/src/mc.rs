//! Monte Carlo harness: replicate a design, fit the requested estimators on
//! each replication, and summarize per-parameter sampling behavior.
//!
//! Replication `k` draws its data from an independent seed derived from the
//! master seed, and replications run in a work pool; every statistic is
//! computed from the collected per-replication vectors, so results are
//! identical for any thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{fit_cmle, fit_graham_cv, fit_qmle, CvVariant, Estimate, FitOptions};
use crate::inference::wald_test;
use crate::simulate::{derive_seed, gen_sample_split, Design};

/// Which estimators to run per replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EstimatorKind {
    Qmle,
    Cmle,
    Cv,
}

impl EstimatorKind {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::Qmle => "QMLE",
            EstimatorKind::Cmle => "CMLE",
            EstimatorKind::Cv => "CV",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qmle" => Ok(EstimatorKind::Qmle),
            "cmle" => Ok(EstimatorKind::Cmle),
            "cv" => Ok(EstimatorKind::Cv),
            other => Err(Error::Domain(format!(
                "unknown estimator '{other}' (expected qmle, cmle or cv)"
            ))),
        }
    }
}

/// One fitted parameter of one replication.
#[derive(Debug, Clone)]
pub struct RepParam {
    pub name: String,
    pub estimate: f64,
    pub std_err: Option<f64>,
    /// 5% Wald rejection of the generating value.
    pub reject05: Option<bool>,
}

/// One estimator's outcome on one replication.
#[derive(Debug, Clone)]
pub struct RepFit {
    pub estimator: EstimatorKind,
    pub converged: bool,
    pub boundary: bool,
    pub params: Vec<RepParam>,
    pub error: Option<String>,
}

/// All outcomes of one replication.
#[derive(Debug, Clone)]
pub struct RepOutcome {
    pub rep: usize,
    pub fits: Vec<RepFit>,
}

/// Per-parameter summary row.
#[derive(Debug, Clone)]
pub struct ParamSummary {
    pub name: String,
    pub median: f64,
    pub rob_std_dev: f64,
    pub std_dev: f64,
    pub est_std_dev: Option<f64>,
    pub rejection_rate: Option<f64>,
}

/// Summary of one estimator across replications. Statistics cover converged
/// replications only; failures are counted, not dropped silently.
#[derive(Debug, Clone)]
pub struct McSummary {
    pub rows: Vec<ParamSummary>,
    pub reps_total: usize,
    pub reps_converged: usize,
    pub reps_boundary: usize,
}

/// Harness configuration.
#[derive(Debug, Clone)]
pub struct McConfig {
    pub reps: usize,
    pub master_seed: u64,
    /// Worker threads; 0 uses the default pool size.
    pub threads: usize,
    pub fit: FitOptions,
}

/// The harness output: per-estimator summaries plus the raw per-replication
/// records for optional dumping.
#[derive(Debug, Clone)]
pub struct McRun {
    pub summaries: BTreeMap<EstimatorKind, McSummary>,
    pub raw: Vec<RepOutcome>,
}

/// Interpolated quantile with index `h = (n−1)p` on a sorted slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Robust standard deviation `(Q75 − Q25)/1.35` with linear-interpolation
/// quantiles.
pub fn robust_std(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("robust_std of an empty sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25)) / 1.35)
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, 0.5)
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
}

/// The generating value of a named parameter under a design.
pub fn true_value(design: &Design, name: &str) -> Option<f64> {
    match name {
        "lambda" => Some(design.lambda),
        "sigma_alpha2" => Some(design.sigma_alpha2),
        "beta_intercept" => Some(design.beta[0]),
        "beta_x1_1" => Some(design.beta[1]),
        "beta_lom_x2_1" => Some(design.beta[2]),
        "beta_x3_1" => Some(design.beta[3]),
        _ => name
            .strip_prefix("sigma_eps2_")
            .and_then(|j| j.parse::<usize>().ok())
            .and_then(|j| design.sigma_eps2.get(j - 1).copied()),
    }
}

fn record_fit(est: &Estimate, design: &Design, kind: EstimatorKind, converged: bool) -> RepFit {
    let params = est
        .names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let se = est.std_err.get(i).copied().filter(|s| s.is_finite());
            let reject = true_value(design, name)
                .and_then(|tv| wald_test(est, i, tv).ok().map(|t| t.reject05));
            RepParam {
                name: name.clone(),
                estimate: est.values[i],
                std_err: se,
                reject05: reject,
            }
        })
        .collect();
    RepFit {
        estimator: kind,
        converged,
        boundary: est.boundary_sigma_alpha,
        params,
        error: None,
    }
}

fn run_one(
    design: &Design,
    estimators: &[EstimatorKind],
    cfg: &McConfig,
    rep: usize,
) -> RepOutcome {
    let rep_seed = derive_seed(cfg.master_seed, rep as u64 + 1);
    let design_seed = if design.freeze_design {
        derive_seed(cfg.master_seed, 0)
    } else {
        derive_seed(rep_seed, 1)
    };
    let error_seed = derive_seed(rep_seed, 2);

    let mut fits = Vec::with_capacity(estimators.len());
    let dataset = gen_sample_split(design, design_seed, error_seed).and_then(|s| s.to_dataset());
    let dataset = match dataset {
        Ok(d) => d,
        Err(e) => {
            for &kind in estimators {
                fits.push(RepFit {
                    estimator: kind,
                    converged: false,
                    boundary: false,
                    params: vec![],
                    error: Some(format!("data generation failed: {e}")),
                });
            }
            return RepOutcome { rep, fits };
        }
    };

    for &kind in estimators {
        let fit = match kind {
            EstimatorKind::Qmle => match fit_qmle(&dataset, &cfg.fit) {
                Ok(est) => record_fit(&est, design, kind, true),
                Err(Error::NonConvergence { best, .. }) => record_fit(&best, design, kind, false),
                Err(e) => RepFit {
                    estimator: kind,
                    converged: false,
                    boundary: false,
                    params: vec![],
                    error: Some(e.to_string()),
                },
            },
            EstimatorKind::Cmle => match fit_cmle(&dataset, &cfg.fit) {
                Ok(est) => {
                    let conv = est.converged;
                    record_fit(&est, design, kind, conv)
                }
                Err(e) => RepFit {
                    estimator: kind,
                    converged: false,
                    boundary: false,
                    params: vec![],
                    error: Some(e.to_string()),
                },
            },
            EstimatorKind::Cv => match fit_graham_cv(&dataset, CvVariant::LeaveOutMean) {
                Ok(cv) => RepFit {
                    estimator: kind,
                    converged: true,
                    boundary: false,
                    params: vec![
                        RepParam {
                            name: "lambda".into(),
                            estimate: cv.lambda,
                            std_err: None,
                            reject05: None,
                        },
                        RepParam {
                            name: "sigma_alpha2".into(),
                            estimate: cv.sigma_alpha2,
                            std_err: None,
                            reject05: None,
                        },
                    ],
                    error: None,
                },
                Err(e) => RepFit {
                    estimator: kind,
                    converged: false,
                    boundary: false,
                    params: vec![],
                    error: Some(e.to_string()),
                },
            },
        };
        fits.push(fit);
    }
    RepOutcome { rep, fits }
}

/// Run the harness: generate `cfg.reps` replications, fit the requested
/// estimators on each, and summarize.
pub fn run_mc(design: &Design, estimators: &[EstimatorKind], cfg: &McConfig) -> Result<McRun> {
    if cfg.reps == 0 {
        return Err(Error::Domain("reps must be >= 1".into()));
    }
    design.validate()?;
    if estimators.is_empty() {
        return Err(Error::Domain("no estimators requested".into()));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Domain(format!("thread pool: {e}")))?;
    let raw: Vec<RepOutcome> = pool.install(|| {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| run_one(design, estimators, cfg, rep))
            .collect()
    });

    let mut summaries = BTreeMap::new();
    for (ei, &kind) in estimators.iter().enumerate() {
        let fits: Vec<&RepFit> = raw.iter().map(|r| &r.fits[ei]).collect();
        let reps_total = fits.len();
        let reps_converged = fits.iter().filter(|f| f.converged).count();
        let reps_boundary = fits.iter().filter(|f| f.boundary).count();

        // parameter order from the first converged fit
        let mut names: Vec<String> = Vec::new();
        for f in &fits {
            if f.converged && !f.params.is_empty() {
                names = f.params.iter().map(|p| p.name.clone()).collect();
                break;
            }
        }
        let mut rows = Vec::with_capacity(names.len());
        for name in &names {
            let mut estimates = Vec::with_capacity(reps_converged);
            let mut ses = Vec::new();
            let mut rejects = Vec::new();
            for f in &fits {
                if !f.converged {
                    continue;
                }
                if let Some(p) = f.params.iter().find(|p| &p.name == name) {
                    estimates.push(p.estimate);
                    if let Some(se) = p.std_err {
                        ses.push(se);
                    }
                    if let Some(rej) = p.reject05 {
                        rejects.push(rej);
                    }
                }
            }
            if estimates.is_empty() {
                continue;
            }
            rows.push(ParamSummary {
                name: name.clone(),
                median: median(&estimates),
                rob_std_dev: robust_std(&estimates)?,
                std_dev: sample_std(&estimates),
                est_std_dev: if ses.is_empty() {
                    None
                } else {
                    Some(median(&ses))
                },
                rejection_rate: if rejects.is_empty() {
                    None
                } else {
                    Some(rejects.iter().filter(|&&r| r).count() as f64 / rejects.len() as f64)
                },
            });
        }
        summaries.insert(
            kind,
            McSummary {
                rows,
                reps_total,
                reps_converged,
                reps_boundary,
            },
        );
    }
    Ok(McRun { summaries, raw })
}

/// Output format for [`emit_table`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

type RowFormatter = Box<dyn Fn(&ParamSummary) -> String>;

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

/// Render summaries with the table layout of the replication study: rows
/// Median / Rob.Std.Dev. / Std.Dev. / Est.Std.Dev. / Rej., one block per
/// estimator, parameters in fit order, values at 3 decimals.
pub fn emit_table(summaries: &BTreeMap<EstimatorKind, McSummary>, format: TableFormat) -> String {
    match format {
        TableFormat::Markdown => {
            let mut out = String::new();
            for (kind, s) in summaries {
                out.push_str(&format!(
                    "## {} ({} of {} replications converged, {} at the sigma_alpha2 boundary)\n\n",
                    kind.label(),
                    s.reps_converged,
                    s.reps_total,
                    s.reps_boundary
                ));
                out.push_str("| statistic |");
                for r in &s.rows {
                    out.push_str(&format!(" {} |", r.name));
                }
                out.push('\n');
                out.push_str("|---|");
                for _ in &s.rows {
                    out.push_str("---|");
                }
                out.push('\n');
                let lines: [(&str, RowFormatter); 5] = [
                    ("Median", Box::new(|r: &ParamSummary| fmt3(r.median))),
                    (
                        "Rob.Std.Dev.",
                        Box::new(|r: &ParamSummary| fmt3(r.rob_std_dev)),
                    ),
                    ("Std.Dev.", Box::new(|r: &ParamSummary| fmt3(r.std_dev))),
                    (
                        "Est.Std.Dev.",
                        Box::new(|r: &ParamSummary| r.est_std_dev.map(fmt3).unwrap_or_default()),
                    ),
                    (
                        "Rej.",
                        Box::new(|r: &ParamSummary| r.rejection_rate.map(fmt3).unwrap_or_default()),
                    ),
                ];
                for (label, f) in &lines {
                    out.push_str(&format!("| {label} |"));
                    for r in &s.rows {
                        out.push_str(&format!(" {} |", f(r)));
                    }
                    out.push('\n');
                }
                out.push('\n');
            }
            out
        }
        TableFormat::Csv => {
            let mut out = String::from(
                "estimator,parameter,median,rob_std_dev,std_dev,est_std_dev,rejection_rate,reps_total,reps_converged,reps_boundary\n",
            );
            for (kind, s) in summaries {
                for r in &s.rows {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{}\n",
                        kind.label(),
                        r.name,
                        fmt3(r.median),
                        fmt3(r.rob_std_dev),
                        fmt3(r.std_dev),
                        r.est_std_dev.map(fmt3).unwrap_or_default(),
                        r.rejection_rate.map(fmt3).unwrap_or_default(),
                        s.reps_total,
                        s.reps_converged,
                        s.reps_boundary
                    ));
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn robust_std_conventions() {
        // (1,2,3,4,5): interpolated quartiles Q25 = 2, Q75 = 4
        let v = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let r = robust_std(&v).unwrap();
        assert!((r - 2.0 / 1.35).abs() < 1e-12);

        let c = vec![7.0; 10];
        assert_eq!(robust_std(&c).unwrap(), 0.0);

        assert!(robust_std(&[]).is_err());
    }

    #[test]
    fn robust_std_normal_sample() {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let normal = rand_distr::StandardNormal;
        let v: Vec<f64> = (0..400_000).map(|_| normal.sample(&mut rng)).collect();
        let r = robust_std(&v).unwrap();
        // population value 2·0.67449/1.35 = 0.99926
        assert!((r - 0.99926).abs() < 0.01, "robust std {r}");
    }

    #[test]
    fn single_rep_summary_degenerates() {
        let design = Design::baseline(40);
        let cfg = McConfig {
            reps: 1,
            master_seed: 11,
            threads: 1,
            fit: FitOptions {
                multistart: 1,
                ..Default::default()
            },
        };
        let run = run_mc(&design, &[EstimatorKind::Qmle], &cfg).unwrap();
        let s = &run.summaries[&EstimatorKind::Qmle];
        assert_eq!(s.reps_total, 1);
        let lam = &s.rows[0];
        assert_eq!(lam.std_dev, 0.0);
        assert_eq!(lam.rob_std_dev, 0.0);
        // the single estimate is its own median
        let raw_est = run.raw[0].fits[0]
            .params
            .iter()
            .find(|p| p.name == "lambda")
            .unwrap()
            .estimate;
        assert_eq!(lam.median, raw_est);
    }

    #[test]
    fn thread_count_does_not_change_tables() {
        let design = Design::baseline(30);
        let fit = FitOptions {
            multistart: 1,
            ..Default::default()
        };
        let run1 = run_mc(
            &design,
            &[EstimatorKind::Qmle, EstimatorKind::Cmle],
            &McConfig {
                reps: 12,
                master_seed: 5,
                threads: 1,
                fit: fit.clone(),
            },
        )
        .unwrap();
        let run2 = run_mc(
            &design,
            &[EstimatorKind::Qmle, EstimatorKind::Cmle],
            &McConfig {
                reps: 12,
                master_seed: 5,
                threads: 4,
                fit,
            },
        )
        .unwrap();
        let t1 = emit_table(&run1.summaries, TableFormat::Csv);
        let t2 = emit_table(&run2.summaries, TableFormat::Csv);
        assert_eq!(t1, t2);
    }

    #[test]
    fn csv_round_trips_through_parser() {
        let design = Design::baseline(25);
        let cfg = McConfig {
            reps: 4,
            master_seed: 3,
            threads: 1,
            fit: FitOptions {
                multistart: 1,
                ..Default::default()
            },
        };
        let run = run_mc(&design, &[EstimatorKind::Qmle], &cfg).unwrap();
        let text = emit_table(&run.summaries, TableFormat::Csv);
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), run.summaries[&EstimatorKind::Qmle].rows.len());
        // markdown shows the same numbers at 3 decimals
        let md = emit_table(&run.summaries, TableFormat::Markdown);
        for row in &rows {
            assert!(
                md.contains(&row[2]),
                "median {} missing from markdown",
                &row[2]
            );
        }
    }

    #[test]
    fn true_value_lookup() {
        let d = Design::baseline(10);
        assert_eq!(true_value(&d, "lambda"), Some(0.5));
        assert_eq!(true_value(&d, "sigma_alpha2"), Some(0.25));
        assert_eq!(true_value(&d, "sigma_eps2_1"), Some(1.0));
        assert_eq!(true_value(&d, "beta_lom_x2_1"), Some(1.0));
        assert_eq!(true_value(&d, "nope"), None);
    }
}
