//! Coupled estimating equations for `(beta, rho)`.
//!
//! `beta` solves the marginal estimating equation
//! `m^-1 sum_i D_i' V_i^-1 (y_i - mu_i) = 0`, where `V_i` is the genuine
//! outcome covariance implied by the frailty model. `rho` maximizes the
//! pairwise composite log-likelihood with `beta` held fixed. The two are
//! either combined in a fixed four-stage sequence or alternated to a joint
//! root.

use nalgebra::{DMatrix, DVector};

use crate::data::{ClusterData, Dataset};
use crate::error::{Error, Result};
use crate::linalg::sup_norm;
use crate::model::{
    bernoulli_variance, inverse_logit, CorrelationStructure, PairKernel, StructureKind, Theta,
};
use crate::variance::{self, CovarianceReport};

/// Upper limit of the fitted correlation (and of `rho2 + rho3`).
pub const RHO_MAX: f64 = 1.0 - 1e-6;

const MAX_BETA_NORM: f64 = 1e3;
const MAX_HALVINGS: usize = 10;
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FitMode {
    FourStep,
    AlternateToConvergence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Sup-norm tolerance on the `beta` estimating function.
    pub beta_tol: f64,
    /// Sup-norm tolerance on the composite score for `rho`.
    pub rho_tol: f64,
    /// Iteration cap for each inner solve.
    pub max_iter: usize,
    /// Cap on outer alternations.
    pub max_outer: usize,
    /// Fixed correlation used in the first `beta` solve (zeros when `None`).
    pub rho_init: Option<Vec<f64>>,
    pub mode: FitMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            beta_tol: 1e-8,
            rho_tol: 1e-8,
            max_iter: 50,
            max_outer: 25,
            rho_init: None,
            mode: FitMode::FourStep,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_tol > 0.0 && self.rho_tol > 0.0) {
            return Err(Error::Argument("tolerances must be positive".into()));
        }
        if self.max_iter == 0 || self.max_outer == 0 {
            return Err(Error::Argument("iteration caps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-cluster pieces of the `beta` estimating function:
/// `u = D' V^-1 S` and `info = D' V^-1 D`.
#[derive(Debug, Clone)]
pub(crate) struct ClusterGee {
    pub u: DVector<f64>,
    pub info: DMatrix<f64>,
}

/// Evaluates `D' V^-1 S` and `D' V^-1 D` for one cluster. With
/// `W = diag(p(1-p))` and `R` the outcome correlation, `D = W X` and
/// `V = W^1/2 R W^1/2`, so both reduce to solves against the Cholesky
/// factor of `R`.
pub(crate) fn cluster_gee(
    cluster: &ClusterData,
    beta: &[f64],
    structure: &CorrelationStructure,
) -> Result<ClusterGee> {
    let obs = cluster.observations();
    let n = obs.len();
    let p = beta.len();
    let etas = cluster.linear_predictors(beta);
    let mut g = DMatrix::zeros(n, p);
    let mut resid = DVector::zeros(n);
    for (j, o) in obs.iter().enumerate() {
        let w = bernoulli_variance(etas[j]).max(f64::MIN_POSITIVE);
        let sw = w.sqrt();
        for (l, x) in o.covariates.iter().enumerate() {
            g[(j, l)] = sw * x;
        }
        resid[j] = (f64::from(o.outcome) - inverse_logit(etas[j])) / sw;
    }
    if n == 1 || structure.kind() == StructureKind::Independence {
        return Ok(ClusterGee {
            u: g.tr_mul(&resid),
            info: g.tr_mul(&g),
        });
    }
    let mut r = DMatrix::identity(n, n);
    for j in 0..n {
        for k in j + 1..n {
            let rho = structure.rho_pair(&obs[j], &obs[k])?;
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::Domain(format!(
                    "pair correlation {rho} outside [0, 1] in cluster {}",
                    cluster.label
                )));
            }
            let c = PairKernel::new(etas[j], etas[k], rho).correlation();
            r[(j, k)] = c;
            r[(k, j)] = c;
        }
    }
    let chol = r.cholesky().ok_or_else(|| Error::Numerical {
        cluster: cluster.label,
        message: "outcome covariance is not positive definite".into(),
    })?;
    let l = chol.l();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for j in 0..n {
        lo = lo.min(l[(j, j)]);
        hi = hi.max(l[(j, j)]);
    }
    let cond = (hi / lo).powi(2);
    if !(cond < MAX_CONDITION) {
        return Err(Error::Numerical {
            cluster: cluster.label,
            message: format!("outcome covariance is ill-conditioned (condition ~ {cond:e})"),
        });
    }
    let gh = l
        .solve_lower_triangular(&g)
        .ok_or_else(|| Error::Numerical {
            cluster: cluster.label,
            message: "triangular solve failed".into(),
        })?;
    let rh = l
        .solve_lower_triangular(&resid)
        .ok_or_else(|| Error::Numerical {
            cluster: cluster.label,
            message: "triangular solve failed".into(),
        })?;
    Ok(ClusterGee {
        u: gh.tr_mul(&rh),
        info: gh.tr_mul(&gh),
    })
}

pub(crate) fn all_cluster_gee(dataset: &Dataset, theta: &Theta) -> Result<Vec<ClusterGee>> {
    check_beta(dataset, &theta.beta)?;
    dataset
        .clusters()
        .iter()
        .map(|c| cluster_gee(c, &theta.beta, &theta.rho))
        .collect()
}

fn check_beta(dataset: &Dataset, beta: &[f64]) -> Result<()> {
    if dataset.n_covariates() != beta.len() {
        return Err(Error::Argument(format!(
            "beta has length {} but the dataset has {} covariates",
            beta.len(),
            dataset.n_covariates()
        )));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Domain("beta must be finite".into()));
    }
    Ok(())
}

/// Estimating function for `beta` and its sensitivity, both averaged over
/// clusters.
#[derive(Debug, Clone)]
pub struct GeeTerms {
    pub score: DVector<f64>,
    pub sensitivity: DMatrix<f64>,
}

pub fn gee_score(dataset: &Dataset, theta: &Theta) -> Result<GeeTerms> {
    let p = theta.beta.len();
    let m = dataset.n_clusters() as f64;
    let mut score = DVector::zeros(p);
    let mut sensitivity = DMatrix::zeros(p, p);
    for t in all_cluster_gee(dataset, theta)? {
        score += t.u;
        sensitivity += t.info;
    }
    Ok(GeeTerms {
        score: score / m,
        sensitivity: sensitivity / m,
    })
}

#[derive(Debug, Clone)]
pub struct BetaFit {
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub score_norm: f64,
}

/// Fisher scoring for `beta` with the correlation held fixed.
pub fn solve_beta(
    dataset: &Dataset,
    structure: &CorrelationStructure,
    beta_init: Option<&[f64]>,
    config: &SolverConfig,
) -> Result<BetaFit> {
    config.validate()?;
    let p = dataset.n_covariates();
    let mut beta = DVector::from_vec(match beta_init {
        Some(b) => b.to_vec(),
        None => vec![0.0; p],
    });
    check_beta(dataset, beta.as_slice())?;
    let eval = |b: &DVector<f64>| {
        gee_score(
            dataset,
            &Theta {
                beta: b.as_slice().to_vec(),
                rho: structure.clone(),
            },
        )
    };
    let mut terms = eval(&beta)?;
    let mut norm = sup_norm(terms.score.as_slice());
    let mut trace = vec![norm];
    for iter in 0..config.max_iter {
        if norm < config.beta_tol {
            check_separation(dataset, beta.as_slice())?;
            return Ok(BetaFit {
                beta: beta.as_slice().to_vec(),
                iterations: iter,
                score_norm: norm,
            });
        }
        let step = terms
            .sensitivity
            .clone()
            .cholesky()
            .map(|c| c.solve(&terms.score))
            .or_else(|| terms.sensitivity.clone().lu().solve(&terms.score))
            .ok_or_else(|| Error::Singular("beta sensitivity matrix is singular".into()))?;
        let mut scale = 1.0;
        let mut fallback = None;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta + &step * scale;
            if cand.norm() > MAX_BETA_NORM {
                return Err(Error::Separation(format!(
                    "|beta| exceeded {MAX_BETA_NORM} during scoring"
                )));
            }
            match eval(&cand) {
                Ok(t) => {
                    let n = sup_norm(t.score.as_slice());
                    if n < norm {
                        accepted = Some((cand, t, n));
                        break;
                    }
                    fallback = Some((cand, t, n));
                }
                Err(e @ Error::Argument(_)) => return Err(e),
                Err(_) => {}
            }
            scale *= 0.5;
        }
        let (b, t, n) = accepted.or(fallback).ok_or_else(|| Error::Convergence {
            stage: "beta",
            message: "no admissible step".into(),
            trace: trace.clone(),
        })?;
        beta = b;
        terms = t;
        norm = n;
        trace.push(norm);
    }
    if norm < config.beta_tol {
        check_separation(dataset, beta.as_slice())?;
        return Ok(BetaFit {
            beta: beta.as_slice().to_vec(),
            iterations: config.max_iter,
            score_norm: norm,
        });
    }
    Err(Error::Convergence {
        stage: "beta",
        message: format!(
            "score sup-norm {norm:e} above {:e} after {} iterations",
            config.beta_tol, config.max_iter
        ),
        trace,
    })
}

/// Perfect prediction of every outcome means the root sits at infinity.
fn check_separation(dataset: &Dataset, beta: &[f64]) -> Result<()> {
    let worst = dataset
        .clusters()
        .iter()
        .flat_map(|c| c.observations())
        .map(|o| (f64::from(o.outcome) - inverse_logit(o.linear_predictor(beta))).abs())
        .fold(0.0_f64, f64::max);
    if worst < 1e-6 {
        return Err(Error::Separation(
            "fitted probabilities reproduce every outcome".into(),
        ));
    }
    Ok(())
}

/// Pairwise composite log-likelihood of one cluster and its gradient in the
/// correlation parameters.
pub(crate) fn cluster_composite(
    cluster: &ClusterData,
    beta: &[f64],
    structure: &CorrelationStructure,
) -> Result<(f64, [f64; 2])> {
    let obs = cluster.observations();
    let n = obs.len();
    let q = structure.n_params();
    let etas = cluster.linear_predictors(beta);
    let mut ll = 0.0;
    let mut grad = [0.0; 2];
    for j in 0..n {
        for k in j + 1..n {
            let (rho, drho) = structure.rho_pair_with_grad(&obs[j], &obs[k])?;
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::Domain(format!(
                    "pair correlation {rho} outside [0, 1] in cluster {}",
                    cluster.label
                )));
            }
            let kernel = PairKernel::new(etas[j], etas[k], rho);
            let (yj, yk) = (obs[j].outcome, obs[k].outcome);
            let cell = kernel.log_cell(yj, yk);
            if !cell.is_finite() {
                return Err(Error::Domain(format!(
                    "nonpositive pair cell probability in cluster {}",
                    cluster.label
                )));
            }
            ll += cell;
            if q > 0 {
                let d = kernel.dlog_cell(yj, yk);
                for (g, dr) in grad.iter_mut().zip(drho).take(q) {
                    *g += d * dr;
                }
            }
        }
    }
    Ok((ll, grad))
}

fn composite_terms(dataset: &Dataset, theta: &Theta) -> Result<(f64, Vec<f64>)> {
    check_beta(dataset, &theta.beta)?;
    let q = theta.rho.n_params();
    let mut ll = 0.0;
    let mut grad = vec![0.0; q];
    for c in dataset.clusters() {
        let (l, g) = cluster_composite(c, &theta.beta, &theta.rho)?;
        ll += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let m = dataset.n_clusters() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    Ok((ll / m, grad))
}

/// `m^-1 sum_i sum_{j<k} l_jk`.
pub fn composite_loglik(dataset: &Dataset, theta: &Theta) -> Result<f64> {
    composite_terms(dataset, theta).map(|(l, _)| l)
}

/// Analytic gradient of [`composite_loglik`] in the correlation parameters.
pub fn composite_score_rho(dataset: &Dataset, theta: &Theta) -> Result<Vec<f64>> {
    composite_terms(dataset, theta).map(|(_, g)| g)
}

#[derive(Debug, Clone)]
pub struct RhoFit {
    pub structure: CorrelationStructure,
    pub iterations: usize,
    /// The maximizer sits on the edge of the admissible region.
    pub boundary: bool,
    pub score_norm: f64,
}

/// Maximizes the composite likelihood over the correlation parameters with
/// `beta` fixed.
pub fn solve_rho(
    dataset: &Dataset,
    beta: &[f64],
    kind: StructureKind,
    config: &SolverConfig,
    start: Option<&[f64]>,
) -> Result<RhoFit> {
    config.validate()?;
    check_beta(dataset, beta)?;
    match kind.n_params() {
        0 => Ok(RhoFit {
            structure: CorrelationStructure::independence(),
            iterations: 0,
            boundary: false,
            score_norm: 0.0,
        }),
        _ if dataset.n_pairs() == 0 => Err(Error::Argument(
            "correlation estimation needs at least one within-cluster pair".into(),
        )),
        1 => solve_rho_scalar(dataset, beta, kind, config, start),
        _ => solve_rho_pair(dataset, beta, kind, config, start),
    }
}

fn theta_at(beta: &[f64], kind: StructureKind, params: &[f64]) -> Theta {
    Theta {
        beta: beta.to_vec(),
        rho: CorrelationStructure::from_params_unchecked(kind, params.to_vec()),
    }
}

/// Newton iteration on the score, safeguarded by a sign bracket and
/// bisection.
fn solve_rho_scalar(
    dataset: &Dataset,
    beta: &[f64],
    kind: StructureKind,
    config: &SolverConfig,
    start: Option<&[f64]>,
) -> Result<RhoFit> {
    let score = |r: f64| -> Result<f64> {
        Ok(composite_score_rho(dataset, &theta_at(beta, kind, &[r]))?[0])
    };
    let done = |r: f64, iterations, boundary, s: f64| RhoFit {
        structure: CorrelationStructure::from_params_unchecked(kind, vec![r]),
        iterations,
        boundary,
        score_norm: s.abs(),
    };
    let s_lo = score(0.0)?;
    if s_lo <= 0.0 {
        return Ok(done(0.0, 0, true, s_lo));
    }
    let s_hi = score(RHO_MAX)?;
    if s_hi >= 0.0 {
        return Ok(done(RHO_MAX, 0, true, s_hi));
    }
    let (mut lo, mut hi) = (0.0, RHO_MAX);
    let mut x = start
        .and_then(|s| s.first().copied())
        .filter(|r| *r > 0.0 && *r < RHO_MAX)
        .unwrap_or(0.3);
    let mut trace = Vec::new();
    let max_iter = 2 * config.max_iter + 60;
    for iter in 0..max_iter {
        let s = score(x)?;
        trace.push(s.abs());
        if s.abs() < config.rho_tol {
            return Ok(done(x, iter, false, s));
        }
        if s > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo < 1e-15 {
            break;
        }
        let h = 1e-6_f64.min(0.5 * x).min(0.5 * (1.0 - x));
        let ds = (score(x + h)? - score(x - h)?) / (2.0 * h);
        let newton = x - s / ds;
        x = if ds < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Err(Error::Convergence {
        stage: "rho",
        message: format!("composite score did not reach {:e}", config.rho_tol),
        trace,
    })
}

/// Euclidean projection onto `{r >= 0, r0 + r1 <= RHO_MAX}`.
fn project_pair(v: [f64; 2]) -> [f64; 2] {
    let mut r = [v[0].max(0.0), v[1].max(0.0)];
    let excess = r[0] + r[1] - RHO_MAX;
    if excess > 0.0 {
        r[0] -= 0.5 * excess;
        r[1] -= 0.5 * excess;
        if r[0] < 0.0 {
            r = [0.0, RHO_MAX];
        } else if r[1] < 0.0 {
            r = [RHO_MAX, 0.0];
        }
    }
    r
}

const EDGE: f64 = 1e-12;

fn projected_gradient_norm(x: [f64; 2], g: [f64; 2]) -> f64 {
    let y = project_pair([x[0] + g[0], x[1] + g[1]]);
    sup_norm(&[y[0] - x[0], y[1] - x[1]])
}

/// Constraint normals active at `r`: lower bounds on each coordinate and
/// the upper bound on the sum.
fn active_normals(r: [f64; 2]) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    if r[0] <= EDGE {
        out.push([-1.0, 0.0]);
    }
    if r[1] <= EDGE {
        out.push([0.0, -1.0]);
    }
    if r[0] + r[1] >= RHO_MAX - EDGE {
        out.push([1.0, 1.0]);
    }
    out
}

/// Projected Newton ascent for the two-parameter nested structures.
fn solve_rho_pair(
    dataset: &Dataset,
    beta: &[f64],
    kind: StructureKind,
    config: &SolverConfig,
    start: Option<&[f64]>,
) -> Result<RhoFit> {
    let eval = |r: [f64; 2]| composite_terms(dataset, &theta_at(beta, kind, &r));
    let grad_at = |r: [f64; 2]| -> Result<[f64; 2]> {
        let g = eval(r)?.1;
        Ok([g[0], g[1]])
    };
    let mut x = match start {
        Some(s) if s.len() == 2 => project_pair([s[0].max(0.01), s[1].max(0.01)]),
        _ => [0.1, 0.1],
    };
    let (mut f, g0) = eval(x)?;
    let mut g = [g0[0], g0[1]];
    let mut trace = Vec::new();
    let max_iter = 2 * config.max_iter;
    for iter in 0..max_iter {
        let y = project_pair([x[0] + g[0], x[1] + g[1]]);
        let pg = [y[0] - x[0], y[1] - x[1]];
        let pg_norm = projected_gradient_norm(x, g);
        trace.push(pg_norm);
        if pg_norm < config.rho_tol {
            let boundary = !active_normals(x).is_empty();
            return Ok(RhoFit {
                structure: CorrelationStructure::from_params_unchecked(kind, x.to_vec()),
                iterations: iter,
                boundary,
                score_norm: pg_norm,
            });
        }
        // Constraints active at x that the projected gradient step keeps
        // active are treated as equalities for the Newton step.
        let binding: Vec<[f64; 2]> = active_normals(x)
            .into_iter()
            .filter(|nrm| nrm[0] * g[0] + nrm[1] * g[1] > 0.0)
            .collect();
        let basis: Vec<[f64; 2]> = match binding.len() {
            0 => vec![[1.0, 0.0], [0.0, 1.0]],
            1 => {
                let nrm = binding[0];
                let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1]).sqrt();
                vec![[-nrm[1] / len, nrm[0] / len]]
            }
            _ => vec![],
        };
        let hess = fd_hessian_pair(&grad_at, x)?;
        let mut dir = [pg[0], pg[1]];
        if !basis.is_empty() {
            let k = basis.len();
            let z = DMatrix::from_fn(2, k, |i, j| basis[j][i]);
            let gz = z.tr_mul(&DVector::from_row_slice(&g));
            let hz = z.tr_mul(&hess) * &z;
            let neg_def = (-&hz).cholesky().is_some();
            if neg_def {
                if let Some(dz) = hz.clone().lu().solve(&gz) {
                    let d = &z * (-dz);
                    dir = [d[0], d[1]];
                }
            }
        }
        // Backtracking on the projected path; fall back to the projected
        // gradient direction when the Newton path does not ascend.
        let mut moved = false;
        for candidate in [dir, pg] {
            let mut t = 1.0;
            for _ in 0..40 {
                let xn = project_pair([x[0] + t * candidate[0], x[1] + t * candidate[1]]);
                if xn == x {
                    break;
                }
                if let Ok((fnew, gn)) = eval(xn) {
                    let lin = g[0] * (xn[0] - x[0]) + g[1] * (xn[1] - x[1]);
                    // Near the root the objective change drops below its
                    // rounding error; a shrinking projected gradient decides.
                    let flat = (fnew - f).abs() <= 64.0 * f64::EPSILON * f.abs()
                        && projected_gradient_norm(xn, [gn[0], gn[1]]) < pg_norm;
                    if (fnew >= f + 1e-4 * lin || flat) && fnew.is_finite() {
                        x = xn;
                        f = fnew;
                        g = [gn[0], gn[1]];
                        moved = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if moved {
                break;
            }
        }
        if !moved {
            break;
        }
    }
    Err(Error::Convergence {
        stage: "rho",
        message: format!(
            "projected composite score did not reach {:e}",
            config.rho_tol
        ),
        trace,
    })
}

/// Symmetrized finite-difference Hessian of the composite log-likelihood in
/// the two correlation parameters, one-sided near the edges.
fn fd_hessian_pair(
    grad: &dyn Fn([f64; 2]) -> Result<[f64; 2]>,
    x: [f64; 2],
) -> Result<DMatrix<f64>> {
    let mut h = DMatrix::zeros(2, 2);
    for i in 0..2 {
        let step = 1e-6;
        let mut up = x;
        let mut dn = x;
        up[i] += step;
        dn[i] -= step;
        let fits_up = up[0] + up[1] <= 1.0;
        let fits_dn = dn[i] >= 0.0;
        let (gu, gd, width) = match (fits_up, fits_dn) {
            (true, true) => (grad(up)?, grad(dn)?, 2.0 * step),
            (true, false) => (grad(up)?, grad(x)?, step),
            (false, true) => (grad(x)?, grad(dn)?, step),
            (false, false) => return Err(Error::Boundary("no room for a difference step".into())),
        };
        for j in 0..2 {
            h[(j, i)] = (gu[j] - gd[j]) / width;
        }
    }
    let off = 0.5 * (h[(0, 1)] + h[(1, 0)]);
    h[(0, 1)] = off;
    h[(1, 0)] = off;
    Ok(h)
}

/// Estimates recorded after each `(beta, rho)` stage pair.
#[derive(Debug, Clone, PartialEq)]
pub struct StageEstimate {
    pub beta: Vec<f64>,
    pub rho: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: Theta,
    /// Model-based covariance of `beta_hat`.
    pub beta_cov_model: DMatrix<f64>,
    /// Sandwich covariance of `beta_hat`.
    pub beta_cov_robust: DMatrix<f64>,
    pub composite_loglik: f64,
    /// `(stage, iterations)` for every inner solve, in order.
    pub iterations: Vec<(&'static str, usize)>,
    pub converged: bool,
    pub rho_boundary: bool,
    /// For four-step fits `[(beta1, rho2), (beta2, rho3)]`; alternation
    /// appends one entry per outer pass.
    pub step_trace: Vec<StageEstimate>,
    pub mode: FitMode,
    pub covariance: CovarianceReport,
}

impl FitResult {
    pub fn se_model(&self) -> Vec<f64> {
        self.covariance.se_model.clone()
    }

    pub fn se_robust(&self) -> Vec<f64> {
        self.covariance.se_robust.clone()
    }
}

/// Estimates `(beta, rho)` for `kind`. Confidence intervals in the attached
/// covariance report use `ci_level` 0.95.
pub fn fit(dataset: &Dataset, kind: StructureKind, config: &SolverConfig) -> Result<FitResult> {
    fit_with_level(dataset, kind, config, 0.95)
}

pub fn fit_with_level(
    dataset: &Dataset,
    kind: StructureKind,
    config: &SolverConfig,
    ci_level: f64,
) -> Result<FitResult> {
    config.validate()?;
    if kind.is_nested() && !dataset.clusters()[0].is_three_level() {
        return Err(Error::Structure(format!("{kind} requires subject labels")));
    }
    let rho1 = config
        .rho_init
        .clone()
        .unwrap_or_else(|| vec![0.0; kind.n_params()]);
    let start = CorrelationStructure::new(kind, rho1)?;
    start.validate_layouts(dataset)?;

    let mut iterations = Vec::new();
    let mut step_trace = Vec::new();

    let b1 = solve_beta(dataset, &start, None, config)?;
    iterations.push(("beta", b1.iterations));
    let r2 = solve_rho(dataset, &b1.beta, kind, config, None)?;
    iterations.push(("rho", r2.iterations));
    step_trace.push(StageEstimate {
        beta: b1.beta.clone(),
        rho: r2.structure.params().to_vec(),
    });
    let b2 = solve_beta(dataset, &r2.structure, Some(&b1.beta), config)?;
    iterations.push(("beta", b2.iterations));
    let r3 = solve_rho(dataset, &b2.beta, kind, config, Some(r2.structure.params()))?;
    iterations.push(("rho", r3.iterations));
    step_trace.push(StageEstimate {
        beta: b2.beta.clone(),
        rho: r3.structure.params().to_vec(),
    });

    let (beta, rho_fit, converged) = match config.mode {
        FitMode::FourStep => (b2.beta, r3, true),
        FitMode::AlternateToConvergence => {
            let mut beta = b2.beta;
            let mut rho_fit = r3;
            let mut converged = false;
            for _ in 0..config.max_outer {
                let th = Theta {
                    beta: beta.clone(),
                    rho: rho_fit.structure.clone(),
                };
                // rho_fit solves the composite equation at this beta, so a
                // small beta score means both equations hold.
                if sup_norm(gee_score(dataset, &th)?.score.as_slice()) < config.beta_tol {
                    converged = true;
                    break;
                }
                let b = solve_beta(dataset, &rho_fit.structure, Some(&beta), config)?;
                iterations.push(("beta", b.iterations));
                let r = solve_rho(
                    dataset,
                    &b.beta,
                    kind,
                    config,
                    Some(rho_fit.structure.params()),
                )?;
                iterations.push(("rho", r.iterations));
                step_trace.push(StageEstimate {
                    beta: b.beta.clone(),
                    rho: r.structure.params().to_vec(),
                });
                beta = b.beta;
                rho_fit = r;
            }
            if !converged {
                return Err(Error::Convergence {
                    stage: "alternation",
                    message: format!("no joint root after {} passes", config.max_outer),
                    trace: vec![],
                });
            }
            (beta, rho_fit, converged)
        }
    };

    rho_fit.structure.validate_layouts(dataset)?;
    let theta_hat = Theta {
        beta,
        rho: rho_fit.structure,
    };
    let covariance =
        variance::covariance_report(dataset, &theta_hat, ci_level, false, rho_fit.boundary)?;
    let composite = composite_loglik(dataset, &theta_hat)?;
    Ok(FitResult {
        beta_cov_model: covariance.beta_cov_model.clone(),
        beta_cov_robust: covariance.beta_cov_robust.clone(),
        theta_hat,
        composite_loglik: composite,
        iterations,
        converged,
        rho_boundary: rho_fit.boundary,
        step_trace,
        mode: config.mode,
        covariance,
    })
}
