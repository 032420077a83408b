//! Closed-form probability kernel of the exponential-frailty model.
//!
//! Conditional on a unit-mean exponential frailty `a`, an outcome is one with
//! probability `exp(-a * exp(-x'beta))`. Integrating the frailty out gives a
//! plain logistic margin, and correlated frailties (built from two Gaussian
//! vectors with correlation `C`, so that `cor(a) = C o C`) give closed-form
//! joint probabilities:
//!
//! ```text
//! pr(Y_j = 1, j in S) = det(I + C_S diag(exp(-x_j'beta)))^-1
//! ```
//!
//! For pairs this reduces to
//! `[(1 - rho) e^{-(eta_j + eta_k)} + e^{-eta_j} + e^{-eta_k} + 1]^-1`.
//! All pairwise quantities are evaluated on the log scale; with
//! `A = e^{-eta_j}`, `B = e^{-eta_k}` and `Den = (1 + A)(1 + B) - rho A B`
//! the four cells have the cancellation-free forms
//!
//! ```text
//! p11 = 1 / Den
//! p10 = B ((1 - rho) A + 1) / ((1 + A) Den)
//! p01 = A ((1 - rho) B + 1) / ((1 + B) Den)
//! p00 = A B (Den + rho) / ((1 + A)(1 + B) Den)
//! ```

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{ClusterData, Dataset, Observation};
use crate::error::{Error, Result};
use crate::linalg::{log_det_lu, min_eigenvalue};

/// Largest cluster handled by the inclusion-exclusion routines by default.
pub const DEFAULT_SIZE_CAP: usize = 20;

/// Eigenvalue tolerance for the Gaussian-scale correlation matrix.
pub const PSD_TOLERANCE: f64 = -1e-10;

pub fn inverse_logit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn lse2(a: f64, b: f64) -> f64 {
    let max = a.max(b);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + ((a - max).exp() + (b - max).exp()).ln()
}

pub fn marginal_prob(x: &[f64], beta: &[f64]) -> Result<f64> {
    if x.len() != beta.len() {
        return Err(Error::Argument(format!(
            "covariate length {} does not match beta length {}",
            x.len(),
            beta.len()
        )));
    }
    Ok(inverse_logit(x.iter().zip(beta).map(|(a, b)| a * b).sum()))
}

/// Shared log-scale pieces of the pairwise kernel at linear predictors
/// `(eta_j, eta_k)` and frailty correlation `rho`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PairKernel {
    la: f64,
    lb: f64,
    rho: f64,
    log1m_rho: f64,
    log_den: f64,
}

impl PairKernel {
    pub(crate) fn new(eta_j: f64, eta_k: f64, rho: f64) -> Self {
        let la = -eta_j;
        let lb = -eta_k;
        let log1m_rho = if rho >= 1.0 {
            f64::NEG_INFINITY
        } else {
            (-rho).ln_1p()
        };
        let log_den = log_sum_exp(&[log1m_rho + la + lb, la, lb, 0.0]);
        Self {
            la,
            lb,
            rho,
            log1m_rho,
            log_den,
        }
    }

    pub(crate) fn log_p11(&self) -> f64 {
        -self.log_den
    }

    /// Log probability of the cell `(y_j, y_k)`.
    pub(crate) fn log_cell(&self, y_j: u8, y_k: u8) -> f64 {
        let Self {
            la,
            lb,
            rho,
            log1m_rho,
            log_den,
        } = *self;
        match (y_j, y_k) {
            (1, 1) => -log_den,
            (1, 0) => lb + lse2(log1m_rho + la, 0.0) - softplus(la) - log_den,
            (0, 1) => la + lse2(log1m_rho + lb, 0.0) - softplus(lb) - log_den,
            _ => {
                let l = lse2(log_den, rho.ln());
                la + lb + l - softplus(la) - softplus(lb) - log_den
            }
        }
    }

    /// Derivative of `log_cell(y_j, y_k)` with respect to `rho`.
    pub(crate) fn dlog_cell(&self, y_j: u8, y_k: u8) -> f64 {
        let Self {
            la,
            lb,
            rho,
            log1m_rho,
            log_den,
        } = *self;
        let r = (la + lb - log_den).exp();
        match (y_j, y_k) {
            (1, 1) => r,
            (1, 0) => -(la + softplus(la) - log_den - lse2(log1m_rho + la, 0.0)).exp(),
            (0, 1) => -(lb + softplus(lb) - log_den - lse2(log1m_rho + lb, 0.0)).exp(),
            _ => (rho * r + 1.0) * (-lse2(log_den, rho.ln())).exp(),
        }
    }

    /// Outcome covariance `p11 - p_j p_k`.
    pub(crate) fn covariance(&self) -> f64 {
        self.rho * (self.la + self.lb - softplus(self.la) - softplus(self.lb) - self.log_den).exp()
    }

    /// Outcome correlation, `rho sqrt(AB) / Den`.
    pub(crate) fn correlation(&self) -> f64 {
        self.rho * (0.5 * (self.la + self.lb) - self.log_den).exp()
    }
}

/// Bernoulli variance `p (1 - p)` at linear predictor `eta`.
pub(crate) fn bernoulli_variance(eta: f64) -> f64 {
    let la = -eta;
    (la - 2.0 * softplus(la)).exp()
}

fn check_rho_unit(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Domain(format!(
            "pair correlation {rho} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `pr(Y_j = 1, Y_k = 1)` for covariate rows `x_j`, `x_k`.
pub fn pairwise_prob(x_j: &[f64], x_k: &[f64], beta: &[f64], rho_jk: f64) -> Result<f64> {
    check_rho_unit(rho_jk)?;
    if x_j.len() != beta.len() || x_k.len() != beta.len() {
        return Err(Error::Argument("covariate/beta dimension mismatch".into()));
    }
    let eta = |x: &[f64]| x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
    Ok(PairKernel::new(eta(x_j), eta(x_k), rho_jk).log_p11().exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StructureKind {
    Independence,
    Exchangeable,
    Ar1,
    NestedExchExch,
    NestedExchAr1,
}

impl StructureKind {
    pub fn n_params(self) -> usize {
        match self {
            StructureKind::Independence => 0,
            StructureKind::Exchangeable | StructureKind::Ar1 => 1,
            StructureKind::NestedExchExch | StructureKind::NestedExchAr1 => 2,
        }
    }

    pub fn is_nested(self) -> bool {
        matches!(
            self,
            StructureKind::NestedExchExch | StructureKind::NestedExchAr1
        )
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            StructureKind::Independence => &[],
            StructureKind::Exchangeable | StructureKind::Ar1 => &["rho"],
            StructureKind::NestedExchExch | StructureKind::NestedExchAr1 => &["rho2", "rho3"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StructureKind::Independence => "indep",
            StructureKind::Exchangeable => "exch",
            StructureKind::Ar1 => "ar1",
            StructureKind::NestedExchExch => "nested-exch",
            StructureKind::NestedExchAr1 => "nested-ar1",
        }
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StructureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "indep" | "independence" => Ok(StructureKind::Independence),
            "exch" | "exchangeable" => Ok(StructureKind::Exchangeable),
            "ar1" => Ok(StructureKind::Ar1),
            "nested-exch" => Ok(StructureKind::NestedExchExch),
            "nested-ar1" => Ok(StructureKind::NestedExchAr1),
            other => Err(Error::Argument(format!(
                "unknown correlation structure '{other}'"
            ))),
        }
    }
}

/// Parametrized family of frailty correlations within a cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStructure {
    kind: StructureKind,
    params: Vec<f64>,
}

impl CorrelationStructure {
    /// Validated constructor: scalar kinds need `0 <= rho < 1`; nested kinds
    /// need nonnegative `(rho2, rho3)` with `rho2 + rho3 < 1`.
    pub fn new(kind: StructureKind, params: Vec<f64>) -> Result<Self> {
        if params.len() != kind.n_params() {
            return Err(Error::Argument(format!(
                "{kind} takes {} parameters, got {}",
                kind.n_params(),
                params.len()
            )));
        }
        if params.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Domain(format!(
                "{kind} parameters {params:?} must be >= 0"
            )));
        }
        if params.iter().sum::<f64>() >= 1.0 {
            return Err(Error::Domain(format!(
                "{kind} parameters {params:?} must sum to less than 1"
            )));
        }
        Ok(Self { kind, params })
    }

    /// Parameters already known to lie in the closed admissible region.
    pub(crate) fn from_params_unchecked(kind: StructureKind, params: Vec<f64>) -> Self {
        debug_assert_eq!(params.len(), kind.n_params());
        Self { kind, params }
    }

    pub fn independence() -> Self {
        Self {
            kind: StructureKind::Independence,
            params: vec![],
        }
    }

    pub fn exchangeable(rho: f64) -> Result<Self> {
        Self::new(StructureKind::Exchangeable, vec![rho])
    }

    pub fn ar1(rho: f64) -> Result<Self> {
        Self::new(StructureKind::Ar1, vec![rho])
    }

    pub fn nested_exch(rho2: f64, rho3: f64) -> Result<Self> {
        Self::new(StructureKind::NestedExchExch, vec![rho2, rho3])
    }

    pub fn nested_ar1(rho2: f64, rho3: f64) -> Result<Self> {
        Self::new(StructureKind::NestedExchAr1, vec![rho2, rho3])
    }

    pub fn zeros(kind: StructureKind) -> Self {
        Self {
            kind,
            params: vec![0.0; kind.n_params()],
        }
    }

    pub fn kind(&self) -> StructureKind {
        self.kind
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Frailty correlation between two distinct observations of a cluster.
    pub fn rho_pair(&self, obs_j: &Observation, obs_k: &Observation) -> Result<f64> {
        self.rho_pair_with_grad(obs_j, obs_k).map(|(r, _)| r)
    }

    /// Frailty correlation and its gradient with respect to the parameters.
    pub fn rho_pair_with_grad(
        &self,
        obs_j: &Observation,
        obs_k: &Observation,
    ) -> Result<(f64, [f64; 2])> {
        let lag = |a: &Observation, b: &Observation| -> Result<i32> {
            let d = (a.position - b.position).unsigned_abs();
            if d == 0 {
                return Err(Error::Structure(
                    "AR(1) pair with identical positions".into(),
                ));
            }
            i32::try_from(d).map_err(|_| Error::Structure("AR(1) lag too large".into()))
        };
        match self.kind {
            StructureKind::Independence => Ok((0.0, [0.0, 0.0])),
            StructureKind::Exchangeable => Ok((self.params[0], [1.0, 0.0])),
            StructureKind::Ar1 => {
                let d = lag(obs_j, obs_k)?;
                let r = self.params[0];
                Ok((r.powi(d), [d as f64 * r.powi(d - 1), 0.0]))
            }
            StructureKind::NestedExchExch | StructureKind::NestedExchAr1 => {
                let (sj, sk) = match (obs_j.subject, obs_k.subject) {
                    (Some(a), Some(b)) => (a, b),
                    _ => {
                        return Err(Error::Structure(format!(
                            "{} requires subject labels",
                            self.kind
                        )))
                    }
                };
                let (r2, r3) = (self.params[0], self.params[1]);
                if sj != sk {
                    return Ok((r2, [1.0, 0.0]));
                }
                if self.kind == StructureKind::NestedExchExch {
                    Ok((r2 + r3, [1.0, 1.0]))
                } else {
                    let d = lag(obs_j, obs_k)?;
                    Ok((r2 + r3.powi(d), [1.0, d as f64 * r3.powi(d - 1)]))
                }
            }
        }
    }

    /// Elementwise square root of the implied frailty correlation matrix,
    /// without the positive-semidefiniteness check.
    pub(crate) fn gaussian_scale_unchecked(&self, cluster: &ClusterData) -> Result<DMatrix<f64>> {
        let obs = cluster.observations();
        let n = obs.len();
        let mut c = DMatrix::identity(n, n);
        if self.kind == StructureKind::Independence {
            return Ok(c);
        }
        for j in 0..n {
            for k in j + 1..n {
                let r = self.rho_pair(&obs[j], &obs[k])?;
                let s = r.max(0.0).sqrt();
                c[(j, k)] = s;
                c[(k, j)] = s;
            }
        }
        Ok(c)
    }

    /// Gaussian-scale correlation matrix `C` with `C o C` the frailty
    /// correlation, checked to be positive semidefinite.
    pub fn gaussian_scale_matrix(&self, cluster: &ClusterData) -> Result<DMatrix<f64>> {
        let c = self.gaussian_scale_unchecked(cluster)?;
        let min_eig = min_eigenvalue(&c);
        if min_eig < PSD_TOLERANCE {
            return Err(Error::Structure(format!(
                "{} with parameters {:?} is not a valid Gaussian correlation for cluster layout {:?} (min eigenvalue {min_eig:e})",
                self.kind,
                self.params,
                cluster.layout_key()
            )));
        }
        Ok(c)
    }

    /// Checks every distinct cluster layout in `dataset` once.
    pub fn validate_layouts(&self, dataset: &Dataset) -> Result<()> {
        if self.kind.is_nested() && !dataset.clusters()[0].is_three_level() {
            return Err(Error::Structure(format!(
                "{} requires subject labels",
                self.kind
            )));
        }
        if self.kind == StructureKind::Independence {
            return Ok(());
        }
        let mut seen = HashSet::new();
        for cluster in dataset.clusters() {
            if cluster.len() < 2 {
                continue;
            }
            if seen.insert(cluster.layout_key()) {
                self.gaussian_scale_matrix(cluster)?;
            }
        }
        Ok(())
    }
}

/// Marginal regression coefficients together with the frailty correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub beta: Vec<f64>,
    pub rho: CorrelationStructure,
}

impl Theta {
    pub fn new(beta: Vec<f64>, rho: CorrelationStructure) -> Result<Self> {
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Domain("beta must be finite".into()));
        }
        Ok(Self { beta, rho })
    }
}

fn check_dims(cluster: &ClusterData, beta: &[f64]) -> Result<()> {
    if cluster.n_covariates() != beta.len() {
        return Err(Error::Argument(format!(
            "cluster {} has {} covariates but beta has length {}",
            cluster.label,
            cluster.n_covariates(),
            beta.len()
        )));
    }
    Ok(())
}

/// Genuine model covariance matrix of the outcome vector of one cluster.
pub fn covariance_matrix(cluster: &ClusterData, theta: &Theta) -> Result<DMatrix<f64>> {
    check_dims(cluster, &theta.beta)?;
    let obs = cluster.observations();
    let etas = cluster.linear_predictors(&theta.beta);
    let n = obs.len();
    let mut v = DMatrix::zeros(n, n);
    for j in 0..n {
        v[(j, j)] = bernoulli_variance(etas[j]);
        for k in j + 1..n {
            let r = theta.rho.rho_pair(&obs[j], &obs[k])?;
            check_rho_unit(r)?;
            let c = PairKernel::new(etas[j], etas[k], r).covariance();
            v[(j, k)] = c;
            v[(k, j)] = c;
        }
    }
    Ok(v)
}

/// Log of `det(I + C diag(exp(-eta)))^-1` for the rows/columns in `subset`.
/// `c` is the full row-major Gaussian-scale matrix of side `n`.
fn joint_all_ones_log(
    etas: &[f64],
    c: &[f64],
    n: usize,
    subset: &[usize],
    buf: &mut Vec<f64>,
) -> Option<f64> {
    let k = subset.len();
    if k == 0 {
        return Some(0.0);
    }
    buf.clear();
    buf.resize(k * k, 0.0);
    // Columns are rescaled by s = max(1, e^{-eta}) so every entry is O(1);
    // the scale is restored through sum(log s).
    let mut log_scale = 0.0;
    for (col, &q) in subset.iter().enumerate() {
        let le = -etas[q];
        let ls = le.max(0.0);
        log_scale += ls;
        let w = (le - ls).exp();
        let inv_s = (-ls).exp();
        for (row, &r) in subset.iter().enumerate() {
            let mut v = c[r * n + q] * w;
            if row == col {
                v += inv_s;
            }
            buf[row * k + col] = v;
        }
    }
    let (sign, log_abs) = log_det_lu(buf, k)?;
    if sign <= 0.0 {
        return None;
    }
    Some(-(log_scale + log_abs))
}

/// `pr(Y_j = 1 for all j)` for design rows `x_s` and Gaussian-scale
/// correlation `c_s` (symmetric, unit diagonal, positive semidefinite).
pub fn joint_prob_all_ones(x_s: &[Vec<f64>], beta: &[f64], c_s: &DMatrix<f64>) -> Result<f64> {
    let n = x_s.len();
    if c_s.nrows() != n || c_s.ncols() != n {
        return Err(Error::Argument(
            "correlation matrix does not match design rows".into(),
        ));
    }
    if x_s.iter().any(|x| x.len() != beta.len()) {
        return Err(Error::Argument("covariate/beta dimension mismatch".into()));
    }
    for j in 0..n {
        if (c_s[(j, j)] - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(
                "correlation matrix must have unit diagonal".into(),
            ));
        }
        for k in 0..j {
            if (c_s[(j, k)] - c_s[(k, j)]).abs() > 1e-12 {
                return Err(Error::Domain("correlation matrix must be symmetric".into()));
            }
        }
    }
    if min_eigenvalue(c_s) < PSD_TOLERANCE {
        return Err(Error::Domain(
            "correlation matrix is not positive semidefinite".into(),
        ));
    }
    let etas: Vec<f64> = x_s
        .iter()
        .map(|x| x.iter().zip(beta).map(|(a, b)| a * b).sum())
        .collect();
    let c: Vec<f64> = c_s.transpose().iter().cloned().collect();
    let subset: Vec<usize> = (0..n).collect();
    joint_all_ones_log(&etas, &c, n, &subset, &mut Vec::new())
        .map(f64::exp)
        .ok_or_else(|| Error::Domain("nonpositive determinant".into()))
}

/// Precomputed linear predictors and Gaussian-scale matrix of one cluster,
/// for repeated inclusion-exclusion evaluations.
pub(crate) struct ClusterKernel {
    etas: Vec<f64>,
    c: Vec<f64>,
    n: usize,
}

impl ClusterKernel {
    pub(crate) fn new(cluster: &ClusterData, theta: &Theta, size_cap: usize) -> Result<Self> {
        check_dims(cluster, &theta.beta)?;
        if cluster.len() > size_cap {
            return Err(Error::Resource(format!(
                "cluster {} has {} observations, above the inclusion-exclusion cap {size_cap}",
                cluster.label,
                cluster.len()
            )));
        }
        let c = theta.rho.gaussian_scale_unchecked(cluster)?;
        Ok(Self {
            etas: cluster.linear_predictors(&theta.beta),
            c: c.transpose().iter().cloned().collect(),
            n: cluster.len(),
        })
    }

    fn joint_log(&self, subset: &[usize], buf: &mut Vec<f64>) -> Result<f64> {
        joint_all_ones_log(&self.etas, &self.c, self.n, subset, buf)
            .ok_or_else(|| Error::Domain("nonpositive determinant in joint probability".into()))
    }

    /// Probability of the outcome pattern given by `outcomes`.
    pub(crate) fn pattern_prob(&self, outcomes: &[u8]) -> Result<f64> {
        let ones: Vec<usize> = (0..self.n).filter(|&j| outcomes[j] == 1).collect();
        let zeros: Vec<usize> = (0..self.n).filter(|&j| outcomes[j] == 0).collect();
        let mut buf = Vec::with_capacity(self.n * self.n);
        let mut subset = Vec::with_capacity(self.n);
        let mut total = 0.0;
        for mask in 0u32..(1u32 << zeros.len()) {
            subset.clear();
            subset.extend_from_slice(&ones);
            subset.extend(
                zeros
                    .iter()
                    .enumerate()
                    .filter(|(b, _)| mask & (1 << b) != 0)
                    .map(|(_, &z)| z),
            );
            let term = self.joint_log(&subset, &mut buf)?.exp();
            if mask.count_ones() % 2 == 0 {
                total += term;
            } else {
                total -= term;
            }
        }
        Ok(total)
    }

    /// Probabilities of all `2^n` patterns; bit `j` of the index is `y_j`.
    pub(crate) fn all_pattern_probs(&self) -> Result<Vec<f64>> {
        let n = self.n;
        let size = 1usize << n;
        let mut buf = Vec::with_capacity(n * n);
        let mut subset = Vec::with_capacity(n);
        let mut f = vec![0.0; size];
        for (mask, slot) in f.iter_mut().enumerate() {
            subset.clear();
            subset.extend((0..n).filter(|j| mask & (1 << j) != 0));
            *slot = self.joint_log(&subset, &mut buf)?.exp();
        }
        // Superset Moebius inversion: pr(Y = y) = sum_{S >= O} (-1)^{|S \ O|} J(S).
        for bit in 0..n {
            for mask in 0..size {
                if mask & (1 << bit) == 0 {
                    f[mask] -= f[mask | (1 << bit)];
                }
            }
        }
        Ok(f)
    }
}

/// `pr(Y_i = y_i | X_i)` by inclusion-exclusion over the zero outcomes.
pub fn pattern_prob(cluster: &ClusterData, theta: &Theta) -> Result<f64> {
    pattern_prob_capped(cluster, theta, DEFAULT_SIZE_CAP)
}

pub fn pattern_prob_capped(cluster: &ClusterData, theta: &Theta, size_cap: usize) -> Result<f64> {
    theta.rho.gaussian_scale_matrix(cluster)?;
    let outcomes: Vec<u8> = cluster.observations().iter().map(|o| o.outcome).collect();
    ClusterKernel::new(cluster, theta, size_cap)?.pattern_prob(&outcomes)
}

/// Probabilities of every outcome pattern of the cluster's design, indexed
/// by bitmask (bit `j` set when `y_j = 1`).
pub fn all_pattern_probs(cluster: &ClusterData, theta: &Theta) -> Result<Vec<f64>> {
    theta.rho.gaussian_scale_matrix(cluster)?;
    ClusterKernel::new(cluster, theta, DEFAULT_SIZE_CAP.min(24))?.all_pattern_probs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn obs(x: f64, y: u8, pos: i64) -> Observation {
        Observation::new(vec![1.0, x], y, pos)
    }

    #[test]
    fn inverse_logit_values() {
        assert_eq!(inverse_logit(0.0), 0.5);
        let hi = inverse_logit(40.0);
        assert!(hi <= 1.0 && hi > 1.0 - 1e-15);
        assert!(inverse_logit(-800.0) >= 0.0);
        assert_relative_eq!(inverse_logit(1.0), 0.7310585786300049, epsilon = 1e-12);
    }

    #[test]
    fn marginal_prob_examples() {
        assert_eq!(marginal_prob(&[1.0, 0.0], &[0.0, -1.2]).unwrap(), 0.5);
        let p = marginal_prob(&[1.0, 1.0], &[1.0, -1.2]).unwrap();
        assert_relative_eq!(p, 0.45016600268752216, epsilon = 1e-12);
        assert!(matches!(
            marginal_prob(&[1.0], &[1.0, 2.0]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn rho_pair_examples() {
        let a = obs(0.0, 1, 1);
        let b = obs(0.0, 1, 3);
        let ex = CorrelationStructure::exchangeable(0.5).unwrap();
        assert_eq!(ex.rho_pair(&a, &b).unwrap(), 0.5);
        let ar = CorrelationStructure::ar1(0.5).unwrap();
        assert_eq!(ar.rho_pair(&a, &b).unwrap(), 0.25);
        let nested = CorrelationStructure::nested_exch(0.3, 0.3).unwrap();
        let s1 = obs(0.0, 1, 0).with_subject(1);
        let s1b = obs(0.0, 1, 1).with_subject(1);
        let s2 = obs(0.0, 1, 0).with_subject(2);
        assert_relative_eq!(nested.rho_pair(&s1, &s1b).unwrap(), 0.6);
        assert_relative_eq!(nested.rho_pair(&s1, &s2).unwrap(), 0.3);
        assert!(matches!(nested.rho_pair(&a, &b), Err(Error::Structure(_))));
        let nar = CorrelationStructure::nested_ar1(0.2, 0.5).unwrap();
        let s1c = obs(0.0, 1, 2).with_subject(1);
        assert_relative_eq!(nar.rho_pair(&s1, &s1c).unwrap(), 0.2 + 0.25);
        assert_relative_eq!(nar.rho_pair(&s1c, &s2).unwrap(), 0.2);
    }

    #[test]
    fn structure_admissibility() {
        assert!(CorrelationStructure::exchangeable(1.0).is_err());
        assert!(CorrelationStructure::exchangeable(-0.1).is_err());
        assert!(CorrelationStructure::nested_exch(0.6, 0.4).is_err());
        assert!(CorrelationStructure::nested_exch(0.6, 0.39).is_ok());
        assert!(CorrelationStructure::new(StructureKind::Ar1, vec![]).is_err());
    }

    #[test]
    fn pairwise_prob_examples() {
        let x = [1.0, 0.0];
        let b = [0.0, 0.0];
        assert_relative_eq!(
            pairwise_prob(&x, &x, &b, 0.0).unwrap(),
            0.25,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            pairwise_prob(&x, &x, &b, 1.0).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            pairwise_prob(&x, &x, &b, 0.5).unwrap(),
            1.0 / 3.5,
            epsilon = 1e-15
        );
        assert!(matches!(
            pairwise_prob(&x, &x, &b, 1.1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn cells_sum_to_one_and_match_differences() {
        for &(ej, ek, r) in &[
            (0.3, -1.2, 0.4),
            (5.0, -6.0, 0.9),
            (-2.0, -3.0, 0.0),
            (1.0, 2.0, 1.0),
        ] {
            let k = PairKernel::new(ej, ek, r);
            let total: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|&(a, b)| k.log_cell(a, b).exp())
                .sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-14);
            let p11 = k.log_p11().exp();
            assert_relative_eq!(
                k.log_cell(1, 0).exp(),
                inverse_logit(ej) - p11,
                epsilon = 1e-14
            );
            assert_relative_eq!(
                k.log_cell(0, 1).exp(),
                inverse_logit(ek) - p11,
                epsilon = 1e-14
            );
            assert_relative_eq!(
                k.covariance(),
                p11 - inverse_logit(ej) * inverse_logit(ek),
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn covariance_matrix_examples() {
        let beta = [0.0, 0.0];
        let one = ClusterData::new(1, vec![obs(0.0, 1, 0)]).unwrap();
        let th = Theta::new(
            beta.to_vec(),
            CorrelationStructure::exchangeable(0.5).unwrap(),
        )
        .unwrap();
        let v = covariance_matrix(&one, &th).unwrap();
        assert_eq!(v.nrows(), 1);
        assert_relative_eq!(v[(0, 0)], 0.25);

        let two = ClusterData::new(1, vec![obs(0.0, 1, 0), obs(0.0, 0, 1)]).unwrap();
        let v = covariance_matrix(&two, &th).unwrap();
        assert_relative_eq!(v[(0, 1)], 1.0 / 3.5 - 0.25, epsilon = 1e-15);
        let mut eig: Vec<f64> = v.symmetric_eigenvalues().iter().cloned().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(eig[0], 0.25 - (1.0 / 3.5 - 0.25), epsilon = 1e-12);
        assert_relative_eq!(eig[1], 1.0 / 3.5, epsilon = 1e-12);

        let ind = Theta::new(vec![0.3, -0.7], CorrelationStructure::independence()).unwrap();
        let three =
            ClusterData::new(2, vec![obs(0.1, 1, 0), obs(2.0, 0, 1), obs(-1.0, 1, 2)]).unwrap();
        let v = covariance_matrix(&three, &ind).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                if j != k {
                    assert_eq!(v[(j, k)], 0.0);
                }
            }
        }
    }

    #[test]
    fn joint_all_ones_examples() {
        let c1 = DMatrix::identity(1, 1);
        let p = joint_prob_all_ones(&[vec![1.0, 0.0]], &[0.0, 0.0], &c1).unwrap();
        assert_relative_eq!(p, 0.5, epsilon = 1e-15);
        let s = 0.5_f64.sqrt();
        let c2 = DMatrix::from_row_slice(2, 2, &[1.0, s, s, 1.0]);
        let p = joint_prob_all_ones(&[vec![1.0, 0.0], vec![1.0, 0.0]], &[0.0, 0.0], &c2).unwrap();
        assert_relative_eq!(p, 1.0 / 3.5, epsilon = 1e-14);
        let bad = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, -0.9, 0.9, 1.0, 0.9, -0.9, 0.9, 1.0]);
        let xs = vec![vec![1.0, 0.0]; 3];
        assert!(matches!(
            joint_prob_all_ones(&xs, &[0.0, 0.0], &bad),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn pattern_prob_examples() {
        let th = Theta::new(
            vec![0.0, 0.0],
            CorrelationStructure::exchangeable(0.5).unwrap(),
        )
        .unwrap();
        let single = ClusterData::new(1, vec![obs(0.0, 0, 0)]).unwrap();
        assert_relative_eq!(pattern_prob(&single, &th).unwrap(), 0.5, epsilon = 1e-15);
        let cases = [
            ((1, 1), 1.0 / 3.5),
            ((1, 0), 0.5 - 1.0 / 3.5),
            ((0, 1), 0.5 - 1.0 / 3.5),
            ((0, 0), 1.0 - 1.0 + 1.0 / 3.5),
        ];
        let mut total = 0.0;
        for ((a, b), want) in cases {
            let c = ClusterData::new(1, vec![obs(0.0, a, 0), obs(0.0, b, 1)]).unwrap();
            let got = pattern_prob(&c, &th).unwrap();
            assert_relative_eq!(got, want, epsilon = 1e-14);
            total += got;
        }
        assert_relative_eq!(total, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn size_cap_enforced() {
        let th = Theta::new(
            vec![0.0, 0.0],
            CorrelationStructure::exchangeable(0.2).unwrap(),
        )
        .unwrap();
        let c = ClusterData::new(1, (0..5).map(|j| obs(0.0, 0, j)).collect()).unwrap();
        assert!(matches!(
            pattern_prob_capped(&c, &th, 4),
            Err(Error::Resource(_))
        ));
    }

    #[test]
    fn all_patterns_agree_with_single_pattern() {
        let th = Theta::new(vec![0.4, -0.8], CorrelationStructure::ar1(0.6).unwrap()).unwrap();
        let xs = [0.3, -1.0, 2.2, 0.0];
        let base: Vec<Observation> = xs
            .iter()
            .enumerate()
            .map(|(j, &x)| obs(x, 0, j as i64))
            .collect();
        let cluster = ClusterData::new(1, base.clone()).unwrap();
        let all = all_pattern_probs(&cluster, &th).unwrap();
        for mask in 0..16usize {
            let mut o = base.clone();
            for (j, ob) in o.iter_mut().enumerate() {
                ob.outcome = ((mask >> j) & 1) as u8;
            }
            let c = ClusterData::new(1, o).unwrap();
            assert_relative_eq!(pattern_prob(&c, &th).unwrap(), all[mask], epsilon = 1e-13);
        }
    }

    #[test]
    fn layout_validation_flags_bad_nested_ar1() {
        // Within-subject sqrt(rho2 + rho3^lag) with a long subject can fail PSD
        // only for extreme mixes; a valid configuration must pass.
        let cl = ClusterData::new(
            1,
            vec![
                obs(0.0, 1, 0).with_subject(1),
                obs(0.0, 1, 1).with_subject(1),
                obs(0.0, 1, 2).with_subject(1),
                obs(0.0, 1, 0).with_subject(2),
            ],
        )
        .unwrap();
        let ds = Dataset::new(vec![cl], vec!["(Intercept)".into(), "x".into()], true).unwrap();
        CorrelationStructure::nested_ar1(0.3, 0.5)
            .unwrap()
            .validate_layouts(&ds)
            .unwrap();
        assert!(CorrelationStructure::exchangeable(0.3)
            .unwrap()
            .validate_layouts(&ds)
            .is_ok());
    }
}
