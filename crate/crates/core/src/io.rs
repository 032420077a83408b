//! CSV ingest and export, fit reports.
//!
//! Input layout: `cluster` (integer) and `y` (0/1) are required; `subject`
//! (integer) switches to three-level data; `time` (integer) sets positions,
//! which otherwise follow row order within each unit. Every other column is
//! a numeric covariate.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ClusterData, Dataset, Observation};
use crate::error::{Error, Result};
use crate::estimation::FitResult;
use crate::mle::MleResult;
use crate::model::StructureKind;
use crate::variance::{joint_sandwich, odds_ratio_ci, wald_ci};

pub const INTERCEPT_NAME: &str = "(Intercept)";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadOptions {
    /// Prepend a column of ones.
    pub intercept: bool,
}

impl Default for ReadOptions {
    fn default() -> Self {
        Self { intercept: true }
    }
}

const RESERVED: [&str; 4] = ["cluster", "subject", "time", "y"];

pub fn read_csv(path: impl AsRef<Path>, options: ReadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    read_csv_from(BufReader::new(file), options)
}

fn parse_int(field: &str, column: &str, line: usize) -> Result<i64> {
    let s = field.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") {
        return Err(Error::Parse {
            line,
            message: format!("missing value in column '{column}'"),
        });
    }
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    match s.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v.abs() < 9.0e15 => Ok(v as i64),
        _ => Err(Error::Parse {
            line,
            message: format!("'{s}' in column '{column}' is not an integer"),
        }),
    }
}

fn parse_num(field: &str, column: &str, line: usize) -> Result<f64> {
    let s = field.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Err(Error::Parse {
            line,
            message: format!("missing value in column '{column}'"),
        });
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse {
            line,
            message: format!("'{s}' in column '{column}' is not a finite number"),
        }),
    }
}

pub fn read_csv_from<R: Read>(reader: R, options: ReadOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let cluster_col = find("cluster").ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing required column 'cluster'".into(),
    })?;
    let y_col = find("y").ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing required column 'y'".into(),
    })?;
    let subject_col = find("subject");
    let time_col = find("time");
    let cov_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| !RESERVED.contains(&headers[i].as_str()))
        .collect();

    let mut order: Vec<i64> = Vec::new();
    let mut groups: HashMap<i64, Vec<Observation>> = HashMap::new();
    let mut counters: HashMap<(i64, Option<i64>), i64> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let cluster = parse_int(&record[cluster_col], "cluster", line)?;
        let y = parse_num(&record[y_col], "y", line)?;
        if y != 0.0 && y != 1.0 {
            return Err(Error::Parse {
                line,
                message: format!("outcome {y} is not 0 or 1"),
            });
        }
        let subject = subject_col
            .map(|c| parse_int(&record[c], "subject", line))
            .transpose()?;
        let counter = counters.entry((cluster, subject)).or_insert(0);
        let position = match time_col {
            Some(c) => parse_int(&record[c], "time", line)?,
            None => *counter,
        };
        *counter += 1;
        let mut covariates = Vec::with_capacity(cov_cols.len() + 1);
        if options.intercept {
            covariates.push(1.0);
        }
        for &c in &cov_cols {
            covariates.push(parse_num(&record[c], &headers[c], line)?);
        }
        let mut obs = Observation::new(covariates, y as u8, position);
        obs.subject = subject;
        groups
            .entry(cluster)
            .or_insert_with(|| {
                order.push(cluster);
                Vec::new()
            })
            .push(obs);
    }
    if order.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let mut names = Vec::new();
    if options.intercept {
        names.push(INTERCEPT_NAME.to_string());
    }
    names.extend(cov_cols.iter().map(|&c| headers[c].clone()));
    if names.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no covariates and no intercept".into(),
        });
    }
    let clusters = order
        .into_iter()
        .map(|id| ClusterData::new(id, groups.remove(&id).unwrap_or_default()))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(clusters, names, options.intercept)
}

/// Writes `dataset` in the input layout, with explicit `time` so that
/// reading the file back reproduces the dataset exactly.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    write_csv_to(dataset, file)
}

pub fn write_csv_to<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let three = dataset.clusters()[0].is_three_level();
    let skip = usize::from(dataset.has_intercept());
    let mut header = vec!["cluster".to_string()];
    if three {
        header.push("subject".into());
    }
    header.push("time".into());
    header.push("y".into());
    header.extend(dataset.covariate_names()[skip..].iter().cloned());
    w.write_record(&header)?;
    for c in dataset.clusters() {
        for o in c.observations() {
            let mut row = vec![c.label.to_string()];
            if let Some(s) = o.subject {
                row.push(s.to_string());
            }
            row.push(o.position.to_string());
            row.push(o.outcome.to_string());
            row.extend(o.covariates[skip..].iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let mut file = File::open(path.as_ref())?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Fit summary written by the CLI. `ci_model`/`ci_robust` are Wald
/// intervals for the odds ratios `exp(beta)`; `beta_ci_*` are the same
/// intervals on the log-odds scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub structure: String,
    pub mode: Option<String>,
    pub coefficients: Vec<String>,
    pub beta: Vec<f64>,
    pub or: Vec<f64>,
    pub se_model: Vec<f64>,
    pub se_robust: Option<Vec<f64>>,
    pub ci_level: f64,
    pub ci_model: Vec<[f64; 2]>,
    pub ci_robust: Option<Vec<[f64; 2]>>,
    pub beta_ci_model: Vec<[f64; 2]>,
    pub beta_ci_robust: Option<Vec<[f64; 2]>>,
    pub rho_names: Vec<String>,
    pub rho: Vec<f64>,
    pub se_rho: Option<Vec<f64>>,
    pub rho_boundary: bool,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: Option<f64>,
    pub composite_loglik: Option<f64>,
    pub n_clusters: usize,
    pub n_observations: usize,
    pub warnings: Vec<String>,
    pub seed: Option<u64>,
    pub input_sha256: String,
    pub version: String,
}

/// Provenance fields shared by all reports.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub input_sha256: String,
}

fn intervals(beta: &[f64], se: &[f64], level: f64) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    let mut on_beta = Vec::with_capacity(beta.len());
    let mut on_or = Vec::with_capacity(beta.len());
    for (b, s) in beta.iter().zip(se) {
        let (lo, hi) = wald_ci(*b, *s, level)?;
        on_beta.push([lo, hi]);
        let (olo, ohi) = odds_ratio_ci(*b, *s, level)?;
        on_or.push([olo, ohi]);
    }
    Ok((on_beta, on_or))
}

fn rho_names(kind: StructureKind) -> Vec<String> {
    kind.param_names().iter().map(|s| s.to_string()).collect()
}

impl Report {
    pub fn from_fit(
        dataset: &Dataset,
        fit: &FitResult,
        ci_level: f64,
        provenance: Provenance,
    ) -> Result<Self> {
        let beta = fit.theta_hat.beta.clone();
        let se_model = fit.se_model();
        let se_robust = fit.se_robust();
        let (bm, om) = intervals(&beta, &se_model, ci_level)?;
        let (br, or_r) = intervals(&beta, &se_robust, ci_level)?;
        let mut warnings = fit.covariance.warnings.clone();
        let se_rho = if fit.theta_hat.rho.n_params() == 0 {
            None
        } else {
            match joint_sandwich(dataset, &fit.theta_hat, fit.rho_boundary) {
                Ok(v) => Some(
                    (beta.len()..v.nrows())
                        .map(|i| v[(i, i)].max(0.0).sqrt())
                        .collect(),
                ),
                Err(Error::Boundary(msg)) => {
                    warnings.push(msg);
                    None
                }
                Err(e) => return Err(e),
            }
        };
        Ok(Self {
            method: "proposed".into(),
            structure: fit.theta_hat.rho.kind().as_str().into(),
            mode: Some(
                match fit.mode {
                    crate::estimation::FitMode::FourStep => "four-step",
                    crate::estimation::FitMode::AlternateToConvergence => "alternate",
                }
                .into(),
            ),
            coefficients: dataset.covariate_names().to_vec(),
            or: beta.iter().map(|b| b.exp()).collect(),
            beta,
            se_model,
            se_robust: Some(se_robust),
            ci_level,
            ci_model: om,
            ci_robust: Some(or_r),
            beta_ci_model: bm,
            beta_ci_robust: Some(br),
            rho_names: rho_names(fit.theta_hat.rho.kind()),
            rho: fit.theta_hat.rho.params().to_vec(),
            se_rho,
            rho_boundary: fit.rho_boundary,
            converged: fit.converged,
            iterations: fit.iterations.iter().map(|(_, n)| n).sum(),
            loglik: None,
            composite_loglik: Some(fit.composite_loglik),
            n_clusters: dataset.n_clusters(),
            n_observations: dataset.n_observations(),
            warnings,
            seed: provenance.seed,
            input_sha256: provenance.input_sha256,
            version: env!("CARGO_PKG_VERSION").into(),
        })
    }

    pub fn from_mle(
        dataset: &Dataset,
        fit: &MleResult,
        ci_level: f64,
        provenance: Provenance,
    ) -> Result<Self> {
        let beta = fit.theta_hat.beta.clone();
        let (bm, om) = intervals(&beta, &fit.se_beta, ci_level)?;
        let mut warnings = Vec::new();
        if fit.boundary {
            warnings.push("correlation estimate on the boundary".into());
        }
        Ok(Self {
            method: "mle".into(),
            structure: fit.theta_hat.rho.kind().as_str().into(),
            mode: None,
            coefficients: dataset.covariate_names().to_vec(),
            or: beta.iter().map(|b| b.exp()).collect(),
            beta,
            se_model: fit.se_beta.clone(),
            se_robust: None,
            ci_level,
            ci_model: om,
            ci_robust: None,
            beta_ci_model: bm,
            beta_ci_robust: None,
            rho_names: rho_names(fit.theta_hat.rho.kind()),
            rho: fit.theta_hat.rho.params().to_vec(),
            se_rho: fit.se_rho.clone(),
            rho_boundary: fit.boundary,
            converged: fit.converged,
            iterations: fit.n_grad_evals,
            loglik: Some(fit.loglik),
            composite_loglik: None,
            n_clusters: dataset.n_clusters(),
            n_observations: dataset.n_observations(),
            warnings,
            seed: provenance.seed,
            input_sha256: provenance.input_sha256,
            version: env!("CARGO_PKG_VERSION").into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    /// `.csv` selects CSV; anything else is JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }
}

pub fn write_report(report: &Report, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    write_report_to(report, format, file)
}

/// The CSV form has one row per coefficient: name, odds ratio and the
/// robust interval (model-based when no robust interval exists).
pub fn write_report_to<W: Write>(report: &Report, format: ReportFormat, mut out: W) -> Result<()> {
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, report)?;
            out.write_all(b"\n")?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["coefficient", "or", "ci_low", "ci_high"])?;
            let ci = report.ci_robust.as_ref().unwrap_or(&report.ci_model);
            for ((name, or), [lo, hi]) in report.coefficients.iter().zip(&report.or).zip(ci) {
                w.write_record([name.clone(), or.to_string(), lo.to_string(), hi.to_string()])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Report> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}
