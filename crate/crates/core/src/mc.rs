//! Parallel Monte Carlo studies over the preset simulation designs.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{self, SolverConfig};
use crate::frailty::{derive_seed, preset_scenario, simulate_dataset, Scenario};
use crate::mle::{self, MleConfig};
use crate::variance::wald_ci;

/// Environment variable consulted when `workers` is 0.
pub const THREADS_ENV: &str = "MARGEX_THREADS";

/// Share of failed replicates above which a study is abandoned.
const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Proposed,
    Mle,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Mle => "mle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "proposed" => Ok(Method::Proposed),
            "mle" => Ok(Method::Mle),
            other => Err(Error::Argument(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySpec {
    pub scenario: Scenario,
    /// True correlation parameters; empty for the latent logistic design.
    pub rho: Vec<f64>,
    pub n_reps: usize,
    pub methods: Vec<Method>,
    pub master_seed: u64,
    pub ci_level: f64,
    /// Worker threads; 0 defers to `MARGEX_THREADS`, then to rayon.
    pub workers: usize,
    /// Overrides the preset number of clusters.
    pub cluster_count: Option<usize>,
    pub solver: SolverConfig,
    pub mle: MleConfig,
}

impl StudySpec {
    pub fn new(scenario: Scenario, rho: Vec<f64>, n_reps: usize, master_seed: u64) -> Self {
        Self {
            scenario,
            rho,
            n_reps,
            methods: vec![Method::Proposed],
            master_seed,
            ci_level: 0.95,
            workers: 0,
            cluster_count: None,
            solver: SolverConfig::default(),
            mle: MleConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_reps == 0 {
            return Err(Error::Argument("n_reps must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Argument("at least one method is required".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Argument("ci_level must lie in (0, 1)".into()));
        }
        if self.cluster_count == Some(0) {
            return Err(Error::Argument("cluster_count must be at least 1".into()));
        }
        preset_scenario(self.scenario, &self.rho)?;
        Ok(())
    }
}

/// Estimates from one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFit {
    pub beta: Vec<f64>,
    pub rho: Vec<f64>,
    pub se_model: Vec<f64>,
    /// Absent for the likelihood fit.
    pub se_robust: Option<Vec<f64>>,
    pub rho_boundary: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub index: usize,
    pub seed: u64,
    /// One entry per requested method, in request order.
    pub fits: Vec<(Method, std::result::Result<ReplicateFit, String>)>,
}

/// Simulates replicate `index` and fits every requested method.
pub fn run_replicate(spec: &StudySpec, index: usize) -> Result<Replicate> {
    let seed = derive_seed(spec.master_seed, index as u64);
    let mut config = preset_scenario(spec.scenario, &spec.rho)?.with_seed(seed);
    if let Some(m) = spec.cluster_count {
        config = config.with_cluster_count(m);
    }
    let data = simulate_dataset(&config)?;
    let kind = spec.scenario.fit_kind();
    let fits = spec
        .methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let fit = match method {
                Method::Proposed => {
                    estimation::fit(&data, kind, &spec.solver).map(|f| ReplicateFit {
                        se_model: f.se_model(),
                        se_robust: Some(f.se_robust()),
                        beta: f.theta_hat.beta,
                        rho: f.theta_hat.rho.params().to_vec(),
                        rho_boundary: f.rho_boundary,
                        seconds: 0.0,
                    })
                }
                Method::Mle => mle::fit_mle(&data, kind, &spec.mle).map(|f| ReplicateFit {
                    se_model: f.se_beta,
                    se_robust: None,
                    beta: f.theta_hat.beta,
                    rho: f.theta_hat.rho.params().to_vec(),
                    rho_boundary: f.boundary,
                    seconds: 0.0,
                }),
            };
            let seconds = start.elapsed().as_secs_f64();
            let fit = fit
                .map(|mut f| {
                    f.seconds = seconds;
                    f
                })
                .map_err(|e| e.to_string());
            (method, fit)
        })
        .collect();
    Ok(Replicate { index, seed, fits })
}

/// Monte Carlo summary of one parameter under one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub method: Method,
    pub parameter: String,
    pub truth: Option<f64>,
    pub n_ok: usize,
    pub mean: f64,
    pub bias: Option<f64>,
    /// Sample standard deviation of the estimates (divisor `n - 1`).
    pub sse: Option<f64>,
    /// Mean of the model-based standard errors.
    pub see_model: Option<f64>,
    pub see_robust: Option<f64>,
    /// Mean squared error about the truth.
    pub mse: Option<f64>,
    pub coverage_model: Option<f64>,
    pub coverage_robust: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: Method,
    pub n_failed: usize,
    pub n_boundary: usize,
    pub failures: Vec<(usize, String)>,
    /// Wall-clock seconds per fit; kept out of the CSV summary.
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCSummary {
    pub scenario: Scenario,
    pub rho: Vec<f64>,
    pub n_reps: usize,
    pub cluster_count: usize,
    pub rows: Vec<ParamSummary>,
    pub methods: Vec<MethodStats>,
}

impl MCSummary {
    pub fn row(&self, method: Method, parameter: &str) -> Option<&ParamSummary> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.parameter == parameter)
    }

    pub fn stats(&self, method: Method) -> Option<&MethodStats> {
        self.methods.iter().find(|s| s.method == method)
    }
}

fn worker_count(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Runs all replicates in parallel and reduces them in replicate order, so
/// the summary does not depend on the number of workers.
pub fn run_study(spec: &StudySpec) -> Result<MCSummary> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(spec.workers))
        .build()
        .map_err(|e| Error::Resource(format!("thread pool: {e}")))?;
    let reps: Vec<Replicate> = pool.install(|| {
        (0..spec.n_reps)
            .into_par_iter()
            .map(|r| run_replicate(spec, r))
            .collect::<Result<Vec<_>>>()
    })?;
    summarize(spec, &reps)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let mu = mean(v);
    let ss: f64 = v.iter().map(|x| (x - mu) * (x - mu)).sum();
    Some((ss / (v.len() - 1) as f64).sqrt())
}

/// Reduces replicate fits to per-parameter summaries.
pub fn summarize(spec: &StudySpec, reps: &[Replicate]) -> Result<MCSummary> {
    let config = preset_scenario(spec.scenario, &spec.rho)?;
    let kind = spec.scenario.fit_kind();
    let beta_names: Vec<String> = std::iter::once("beta0".to_string())
        .chain((1..config.beta_true.len()).map(|j| format!("beta{j}")))
        .collect();
    let rho_truth: Vec<Option<f64>> = if spec.scenario.is_misspecified() {
        vec![None; kind.n_params()]
    } else {
        spec.rho.iter().map(|r| Some(*r)).collect()
    };
    let mut rows = Vec::new();
    let mut stats = Vec::new();
    for (mi, &method) in spec.methods.iter().enumerate() {
        let mut ok = Vec::new();
        let mut failures = Vec::new();
        for rep in reps {
            match &rep.fits[mi].1 {
                Ok(f) => ok.push(f),
                Err(msg) => failures.push((rep.index, msg.clone())),
            }
        }
        if failures.len() as f64 > MAX_FAILURE_SHARE * reps.len() as f64 {
            let (idx, msg) = &failures[0];
            return Err(Error::Study(format!(
                "{method}: {} of {} replicates failed (first: replicate {idx}: {msg})",
                failures.len(),
                reps.len()
            )));
        }
        if ok.is_empty() {
            return Err(Error::Study(format!("{method}: no replicate succeeded")));
        }
        for (j, name) in beta_names.iter().enumerate() {
            let truth = config.beta_true[j];
            let est: Vec<f64> = ok.iter().map(|f| f.beta[j]).collect();
            let se_m: Vec<f64> = ok.iter().map(|f| f.se_model[j]).collect();
            let se_r: Option<Vec<f64>> = ok
                .iter()
                .map(|f| f.se_robust.as_ref().map(|s| s[j]))
                .collect();
            let cover = |ses: &[f64]| -> Result<f64> {
                let mut hits = 0usize;
                for (e, s) in est.iter().zip(ses) {
                    let (lo, hi) = wald_ci(*e, *s, spec.ci_level)?;
                    if lo <= truth && truth <= hi {
                        hits += 1;
                    }
                }
                Ok(hits as f64 / est.len() as f64)
            };
            rows.push(ParamSummary {
                method,
                parameter: name.clone(),
                truth: Some(truth),
                n_ok: est.len(),
                mean: mean(&est),
                bias: Some(mean(&est) - truth),
                sse: sample_sd(&est),
                see_model: Some(mean(&se_m)),
                see_robust: se_r.as_ref().map(|s| mean(s)),
                mse: Some(
                    est.iter().map(|e| (e - truth) * (e - truth)).sum::<f64>() / est.len() as f64,
                ),
                coverage_model: Some(cover(&se_m)?),
                coverage_robust: se_r.as_ref().map(|s| cover(s)).transpose()?,
            });
        }
        for (j, name) in kind.param_names().iter().enumerate() {
            let est: Vec<f64> = ok.iter().map(|f| f.rho[j]).collect();
            let truth = rho_truth[j];
            rows.push(ParamSummary {
                method,
                parameter: name.to_string(),
                truth,
                n_ok: est.len(),
                mean: mean(&est),
                bias: truth.map(|t| mean(&est) - t),
                sse: sample_sd(&est),
                see_model: None,
                see_robust: None,
                mse: truth
                    .map(|t| est.iter().map(|e| (e - t) * (e - t)).sum::<f64>() / est.len() as f64),
                coverage_model: None,
                coverage_robust: None,
            });
        }
        stats.push(MethodStats {
            method,
            n_failed: failures.len(),
            n_boundary: ok.iter().filter(|f| f.rho_boundary).count(),
            failures,
            mean_seconds: mean(&ok.iter().map(|f| f.seconds).collect::<Vec<_>>()),
        });
    }
    Ok(MCSummary {
        scenario: spec.scenario,
        rho: spec.rho.clone(),
        n_reps: reps.len(),
        cluster_count: spec.cluster_count.unwrap_or(config.cluster_count),
        rows,
        methods: stats,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes one CSV row per parameter and method. Timing is left out so the
/// output is a pure function of the study specification.
pub fn write_summary_csv<W: Write>(summary: &MCSummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario",
        "method",
        "parameter",
        "truth",
        "n_ok",
        "n_failed",
        "n_boundary",
        "mean",
        "bias",
        "sse",
        "see_model",
        "see_robust",
        "mse",
        "coverage_model",
        "coverage_robust",
    ])?;
    for r in &summary.rows {
        let st = summary.stats(r.method);
        w.write_record([
            summary.scenario.as_str().to_string(),
            r.method.as_str().to_string(),
            r.parameter.clone(),
            cell(r.truth),
            r.n_ok.to_string(),
            st.map(|s| s.n_failed).unwrap_or(0).to_string(),
            st.map(|s| s.n_boundary).unwrap_or(0).to_string(),
            r.mean.to_string(),
            cell(r.bias),
            cell(r.sse),
            cell(r.see_model),
            cell(r.see_robust),
            cell(r.mse),
            cell(r.coverage_model),
            cell(r.coverage_robust),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn summary_csv_string(summary: &MCSummary) -> Result<String> {
    let mut buf = Vec::new();
    write_summary_csv(summary, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Study(e.to_string()))
}
