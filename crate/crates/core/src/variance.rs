//! Model-based, robust and joint sandwich covariance estimates, Wald
//! intervals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimation::{all_cluster_gee, cluster_composite, composite_score_rho};
use crate::linalg::{spd_inverse, symmetrize};
use crate::model::{CorrelationStructure, Theta};

/// Relative step for the finite-difference blocks of the joint sandwich.
const FD_STEP: f64 = 1e-5;

/// Asymptotic model-based covariance `m (sum_i D_i' V_i^-1 D_i)^-1`; divide
/// by `m` for the covariance of `beta_hat`.
pub fn model_based_cov(dataset: &Dataset, theta: &Theta) -> Result<DMatrix<f64>> {
    let p = theta.beta.len();
    let m = dataset.n_clusters() as f64;
    let mut info = DMatrix::zeros(p, p);
    for t in all_cluster_gee(dataset, theta)? {
        info += t.info;
    }
    Ok(spd_inverse(&(info / m), "beta sensitivity matrix")?)
}

/// Asymptotic sandwich `B^-1 C B^-1` with `B` the mean sensitivity and `C`
/// the mean outer product of cluster estimating functions.
pub fn robust_cov(dataset: &Dataset, theta: &Theta) -> Result<DMatrix<f64>> {
    let p = theta.beta.len();
    let m = dataset.n_clusters() as f64;
    let mut info = DMatrix::zeros(p, p);
    let mut meat = DMatrix::zeros(p, p);
    for t in all_cluster_gee(dataset, theta)? {
        meat += &t.u * t.u.transpose();
        info += t.info;
    }
    let bread = spd_inverse(&(info / m), "beta sensitivity matrix")?;
    let mut v = &bread * (meat / m) * &bread;
    symmetrize(&mut v);
    Ok(v)
}

/// Covariance of `(beta_hat, rho_hat)` from the stacked estimating
/// functions, on the scale of the estimates (already divided by `m`).
/// The sensitivity is taken block lower triangular (the `beta` equation is
/// treated as free of `rho`), so the `beta` block equals the robust
/// covariance.
pub fn joint_sandwich(
    dataset: &Dataset,
    theta: &Theta,
    rho_boundary: bool,
) -> Result<DMatrix<f64>> {
    let p = theta.beta.len();
    let q = theta.rho.n_params();
    let m = dataset.n_clusters() as f64;
    if q == 0 {
        return Ok(robust_cov(dataset, theta)? / m);
    }
    if rho_boundary {
        return Err(Error::Boundary(
            "correlation estimate on the boundary; no joint sandwich".into(),
        ));
    }
    let kind = theta.rho.kind();
    let rho = theta.rho.params().to_vec();
    let rho_steps: Vec<f64> = rho.iter().map(|r| FD_STEP * r.abs().max(1.0)).collect();
    let total: f64 = rho.iter().sum();
    for (r, h) in rho.iter().zip(&rho_steps) {
        if r - h < 0.0 || total + h >= 1.0 {
            return Err(Error::Boundary(format!(
                "correlation {rho:?} too close to the boundary for difference steps"
            )));
        }
    }

    let gee = all_cluster_gee(dataset, theta)?;
    let dim = p + q;
    let mut bread = DMatrix::zeros(dim, dim);
    let mut meat = DMatrix::zeros(dim, dim);
    for (cluster, t) in dataset.clusters().iter().zip(&gee) {
        let (_, g) = cluster_composite(cluster, &theta.beta, &theta.rho)?;
        let mut stacked = DVector::zeros(dim);
        stacked.rows_mut(0, p).copy_from(&t.u);
        for k in 0..q {
            stacked[p + k] = g[k];
        }
        meat += &stacked * stacked.transpose();
        let mut block = bread.view_mut((0, 0), (p, p));
        block += &t.info;
    }
    bread /= m;
    meat /= m;

    for l in 0..p {
        let h = FD_STEP * theta.beta[l].abs().max(1.0);
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up.beta[l] += h;
        dn.beta[l] -= h;
        let gu = composite_score_rho(dataset, &up)?;
        let gd = composite_score_rho(dataset, &dn)?;
        for k in 0..q {
            bread[(p + k, l)] = -(gu[k] - gd[k]) / (2.0 * h);
        }
    }
    for (j, h) in rho_steps.iter().enumerate() {
        let shifted = |delta: f64| {
            let mut r = rho.clone();
            r[j] += delta;
            Theta {
                beta: theta.beta.clone(),
                rho: CorrelationStructure::from_params_unchecked(kind, r),
            }
        };
        let gu = composite_score_rho(dataset, &shifted(*h))?;
        let gd = composite_score_rho(dataset, &shifted(-h))?;
        for k in 0..q {
            bread[(p + k, p + j)] = -(gu[k] - gd[k]) / (2.0 * h);
        }
    }
    let inv = bread
        .try_inverse()
        .ok_or_else(|| Error::Singular("joint sensitivity matrix is singular".into()))?;
    let mut v = &inv * meat * inv.transpose() / m;
    symmetrize(&mut v);
    Ok(v)
}

/// Standard errors and covariance matrices on the scale of the estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub beta_cov_model: DMatrix<f64>,
    pub beta_cov_robust: DMatrix<f64>,
    pub joint_cov: Option<DMatrix<f64>>,
    pub se_model: Vec<f64>,
    pub se_robust: Vec<f64>,
    /// Standard errors of the correlation parameters, when interior.
    pub se_rho: Option<Vec<f64>>,
    pub ci_level: f64,
    pub warnings: Vec<String>,
}

/// Builds the covariance report at `theta`. With `joint` set the stacked
/// sandwich is attempted; a boundary correlation estimate leaves it out.
pub fn covariance_report(
    dataset: &Dataset,
    theta: &Theta,
    ci_level: f64,
    joint: bool,
    rho_boundary: bool,
) -> Result<CovarianceReport> {
    check_level(ci_level)?;
    let m = dataset.n_clusters() as f64;
    let p = theta.beta.len();
    let mut warnings = Vec::new();
    if dataset.n_clusters() < p + 1 {
        warnings.push(format!(
            "{} clusters for {p} coefficients; robust covariance is rank deficient",
            dataset.n_clusters()
        ));
    }
    let model = model_based_cov(dataset, theta)? / m;
    let robust = robust_cov(dataset, theta)? / m;
    let (joint_cov, se_rho) = if joint && theta.rho.n_params() > 0 {
        match joint_sandwich(dataset, theta, rho_boundary) {
            Ok(v) => {
                let se = (p..v.nrows()).map(|i| v[(i, i)].max(0.0).sqrt()).collect();
                (Some(v), Some(se))
            }
            Err(Error::Boundary(msg)) => {
                warnings.push(msg);
                (None, None)
            }
            Err(e) => return Err(e),
        }
    } else {
        (None, None)
    };
    Ok(CovarianceReport {
        se_model: diag_sqrt(&model),
        se_robust: diag_sqrt(&robust),
        beta_cov_model: model,
        beta_cov_robust: robust,
        joint_cov,
        se_rho,
        ci_level,
        warnings,
    })
}

fn diag_sqrt(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, i)].max(0.0).sqrt()).collect()
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "confidence level {level} not in (0, 1)"
        )))
    }
}

/// Standard normal quantile.
pub fn normal_quantile(prob: f64) -> f64 {
    if prob <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if prob >= 1.0 {
        return f64::INFINITY;
    }
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * prob)
}

/// Two-sided Wald interval `est -/+ z se`.
pub fn wald_ci(estimate: f64, se: f64, level: f64) -> Result<(f64, f64)> {
    check_level(level)?;
    if !(se >= 0.0) || !se.is_finite() {
        return Err(Error::Domain(format!("standard error {se} is not usable")));
    }
    let z = normal_quantile(0.5 + 0.5 * level);
    Ok((estimate - z * se, estimate + z * se))
}

/// Wald interval for a log odds ratio, mapped to the odds-ratio scale.
pub fn odds_ratio_ci(estimate: f64, se: f64, level: f64) -> Result<(f64, f64)> {
    let (lo, hi) = wald_ci(estimate, se, level)?;
    Ok((lo.exp(), hi.exp()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_reference_values() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-13);
        assert!((normal_quantile(0.5)).abs() < 1e-15);
        assert!((normal_quantile(0.001) + 3.090232306167813).abs() < 1e-12);
        assert!((normal_quantile(0.95) - 1.6448536269514722).abs() < 1e-13);
    }

    #[test]
    fn wald_interval_symmetry() {
        let (lo, hi) = wald_ci(0.2, 0.1, 0.95).unwrap();
        assert!((0.2 - lo - (hi - 0.2)).abs() < 1e-15);
        assert!(wald_ci(0.0, 1.0, 1.0).is_err());
        let (olo, ohi) = odds_ratio_ci(0.2, 0.1, 0.95).unwrap();
        assert!((olo - lo.exp()).abs() < 1e-15 && (ohi - hi.exp()).abs() < 1e-15);
    }
}
