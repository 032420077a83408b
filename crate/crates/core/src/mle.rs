//! Full-likelihood maximum likelihood for the frailty model, used as the
//! comparison method and as an oracle.
//!
//! The optimizer works on unconstrained coordinates: `beta` as is, a single
//! correlation through a logistic map, and nested pairs through a total
//! `s = rho2 + rho3` and a share `w = rho2 / s`, both logistic. Gradients are
//! central differences of the log-likelihood.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimation::{self, cluster_composite, SolverConfig};
use crate::linalg::{spd_inverse, sup_norm};
use crate::model::{ClusterKernel, CorrelationStructure, StructureKind, Theta, DEFAULT_SIZE_CAP};

/// Bound on the transformed correlation coordinates.
const T_CLAMP: f64 = 25.0;
/// A correlation within this distance of 0 or 1 is reported as boundary.
const EDGE: f64 = 1e-6;
/// Transformed coordinate beyond which the correlation counts as boundary.
const SNAP: f64 = 13.8;

/// Which likelihood is maximized jointly over `(beta, rho)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Likelihood {
    Full,
    PairwiseComposite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleConfig {
    /// Sup-norm tolerance for the gradient of the summed log-likelihood in
    /// the optimizer's coordinates.
    pub grad_tol: f64,
    pub max_grad_evals: usize,
    /// Holds the correlation parameters fixed instead of estimating them.
    pub fixed_rho: Option<Vec<f64>>,
    pub size_cap: usize,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_grad_evals: 500,
            fixed_rho: None,
            size_cap: DEFAULT_SIZE_CAP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MleResult {
    pub theta_hat: Theta,
    /// Inverse observed information in natural parameters, `beta` first.
    /// Covers `beta` only when the correlation is fixed or on the boundary.
    pub hessian_cov: DMatrix<f64>,
    pub se_beta: Vec<f64>,
    pub se_rho: Option<Vec<f64>>,
    pub loglik: f64,
    pub converged: bool,
    pub boundary: bool,
    pub n_loglik_evals: usize,
    pub n_grad_evals: usize,
}

/// `sum_i log pr(Y_i = y_i | X_i)`, summed over clusters.
pub fn full_loglik(dataset: &Dataset, theta: &Theta) -> Result<f64> {
    theta.rho.validate_layouts(dataset)?;
    loglik_unchecked(dataset, theta, DEFAULT_SIZE_CAP)
}

fn loglik_unchecked(dataset: &Dataset, theta: &Theta, cap: usize) -> Result<f64> {
    let mut total = 0.0;
    for cluster in dataset.clusters() {
        let outcomes: Vec<u8> = cluster.observations().iter().map(|o| o.outcome).collect();
        let pr = ClusterKernel::new(cluster, theta, cap)?.pattern_prob(&outcomes)?;
        if !(pr > 0.0) {
            return Err(Error::Domain(format!(
                "pattern probability {pr:e} in cluster {}",
                cluster.label
            )));
        }
        total += pr.ln();
    }
    Ok(total)
}

fn composite_sum(dataset: &Dataset, theta: &Theta) -> Result<f64> {
    let mut total = 0.0;
    for cluster in dataset.clusters() {
        total += cluster_composite(cluster, &theta.beta, &theta.rho)?.0;
    }
    Ok(total)
}

fn sigmoid(t: f64) -> f64 {
    crate::model::inverse_logit(t)
}

fn logit(r: f64) -> f64 {
    (r / (1.0 - r)).ln()
}

/// Maps between natural and optimizer coordinates.
struct Param {
    kind: StructureKind,
    p: usize,
    fixed: Option<Vec<f64>>,
}

impl Param {
    fn n_free(&self) -> usize {
        self.p
            + if self.fixed.is_some() {
                0
            } else {
                self.kind.n_params()
            }
    }

    fn rho_of(&self, t: &[f64]) -> Vec<f64> {
        if let Some(r) = &self.fixed {
            return r.clone();
        }
        match self.kind.n_params() {
            0 => vec![],
            1 => vec![sigmoid(t[0])],
            _ => {
                let s = sigmoid(t[0]);
                let w = sigmoid(t[1]);
                vec![s * w, s * (1.0 - w)]
            }
        }
    }

    fn encode(&self, beta: &[f64], rho: &[f64]) -> Vec<f64> {
        let mut z = beta.to_vec();
        if self.fixed.is_none() {
            match rho.len() {
                0 => {}
                1 => z.push(logit(rho[0]).clamp(-T_CLAMP, T_CLAMP)),
                _ => {
                    let s = rho[0] + rho[1];
                    z.push(logit(s).clamp(-T_CLAMP, T_CLAMP));
                    z.push(logit(rho[0] / s).clamp(-T_CLAMP, T_CLAMP));
                }
            }
        }
        z
    }

    fn theta(&self, z: &[f64]) -> Theta {
        Theta {
            beta: z[..self.p].to_vec(),
            rho: CorrelationStructure::from_params_unchecked(self.kind, self.rho_of(&z[self.p..])),
        }
    }
}

struct Objective<'a> {
    dataset: &'a Dataset,
    param: Param,
    which: Likelihood,
    cap: usize,
    evals: usize,
}

impl Objective<'_> {
    /// Negative mean log-likelihood.
    fn value(&mut self, z: &[f64]) -> Result<f64> {
        self.evals += 1;
        let theta = self.param.theta(z);
        let ll = match self.which {
            Likelihood::Full => loglik_unchecked(self.dataset, &theta, self.cap)?,
            Likelihood::PairwiseComposite => composite_sum(self.dataset, &theta)?,
        };
        Ok(-ll / self.dataset.n_clusters() as f64)
    }

    fn gradient(&mut self, z: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; z.len()];
        let mut w = z.to_vec();
        for i in 0..z.len() {
            let h = 1e-6 * z[i].abs().max(1.0);
            w[i] = z[i] + h;
            let up = self.value(&w)?;
            w[i] = z[i] - h;
            let dn = self.value(&w)?;
            w[i] = z[i];
            g[i] = (up - dn) / (2.0 * h);
        }
        Ok(g)
    }
}

fn clamp_coords(z: &mut [f64], p: usize) {
    for t in z[p..].iter_mut() {
        *t = t.clamp(-T_CLAMP, T_CLAMP);
    }
}

/// Maximum likelihood fit under `kind`.
pub fn fit_mle(dataset: &Dataset, kind: StructureKind, config: &MleConfig) -> Result<MleResult> {
    maximize(dataset, kind, config, Likelihood::Full)
}

/// Joint maximization of the pairwise composite likelihood over
/// `(beta, rho)`. For clusters of size two it coincides with [`fit_mle`].
pub fn fit_composite_joint(
    dataset: &Dataset,
    kind: StructureKind,
    config: &MleConfig,
) -> Result<MleResult> {
    maximize(dataset, kind, config, Likelihood::PairwiseComposite)
}

fn maximize(
    dataset: &Dataset,
    kind: StructureKind,
    config: &MleConfig,
    which: Likelihood,
) -> Result<MleResult> {
    if !(config.grad_tol > 0.0) || config.max_grad_evals == 0 {
        return Err(Error::Argument("invalid optimizer settings".into()));
    }
    let p = dataset.n_covariates();
    let q = kind.n_params();
    if let Some(r) = &config.fixed_rho {
        CorrelationStructure::new(kind, r.clone())?.validate_layouts(dataset)?;
    }
    if which == Likelihood::Full && dataset.max_cluster_size() > config.size_cap {
        return Err(Error::Resource(format!(
            "largest cluster has {} observations, above the cap {}",
            dataset.max_cluster_size(),
            config.size_cap
        )));
    }
    let param = Param {
        kind,
        p,
        fixed: config.fixed_rho.clone(),
    };

    // Independence estimating equations give the starting beta.
    let beta0 = estimation::solve_beta(
        dataset,
        &CorrelationStructure::independence(),
        None,
        &SolverConfig::default(),
    )?
    .beta;
    let rho0 = match q {
        0 => vec![],
        1 => vec![0.3],
        _ => vec![0.2, 0.2],
    };
    let mut obj = Objective {
        dataset,
        param,
        which,
        cap: config.size_cap,
        evals: 0,
    };
    let scale = dataset.n_clusters() as f64;
    let mut z = obj.param.encode(&beta0, &rho0);
    let d = z.len();
    debug_assert_eq!(d, obj.param.n_free());
    let mut f = obj.value(&z)?;
    let mut g = obj.gradient(&z)?;
    let mut n_grad = 1;
    let mut hinv = DMatrix::<f64>::identity(d, d);
    let mut converged = false;
    let mut flat_steps = 0;
    while n_grad < config.max_grad_evals {
        // A correlation coordinate already past the boundary threshold and
        // still pushed outward goes straight to the clamp.
        let mut snapped = false;
        for i in p..d {
            let outward = (z[i] > SNAP && z[i] < T_CLAMP && g[i] < 0.0)
                || (z[i] < -SNAP && z[i] > -T_CLAMP && g[i] > 0.0);
            if outward {
                z[i] = T_CLAMP.copysign(z[i]);
                snapped = true;
            }
        }
        if snapped {
            f = obj.value(&z)?;
            g = obj.gradient(&z)?;
            n_grad += 1;
            hinv = DMatrix::identity(d, d);
        }
        // Correlation coordinates pinned at the clamp with the gradient
        // pointing outward are held fixed.
        let active: Vec<bool> = (0..d)
            .map(|i| {
                i >= p && ((z[i] >= T_CLAMP && g[i] < 0.0) || (z[i] <= -T_CLAMP && g[i] > 0.0))
            })
            .collect();
        let gfree: Vec<f64> = g
            .iter()
            .zip(&active)
            .map(|(v, a)| if *a { 0.0 } else { *v })
            .collect();
        if sup_norm(&gfree) * scale < config.grad_tol {
            converged = true;
            break;
        }
        let gv = DVector::from_column_slice(&gfree);
        let mut dir = -(&hinv * &gv);
        for (i, a) in active.iter().enumerate() {
            if *a {
                dir[i] = 0.0;
            }
        }
        if dir.dot(&gv) >= 0.0 {
            hinv = DMatrix::identity(d, d);
            dir = -gv.clone();
        }
        let slope = dir.dot(&gv);
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..50 {
            let mut cand: Vec<f64> = z.iter().zip(dir.iter()).map(|(a, b)| a + t * b).collect();
            clamp_coords(&mut cand, p);
            if cand == z {
                break;
            }
            if let Ok(fc) = obj.value(&cand) {
                if fc.is_finite() && fc <= f + 1e-4 * t * slope {
                    next = Some((cand, fc));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((zn, fnew)) = next else {
            // No descent along the quasi-Newton direction: the gradient is
            // at its noise floor. Accept when close to the tolerance.
            converged = sup_norm(&gfree) * scale < 100.0 * config.grad_tol;
            break;
        };
        // Steps whose gain is within rounding of the objective do not count
        // as progress; a run of them is the same stall as above.
        if f - fnew <= 16.0 * f64::EPSILON * f.abs() {
            flat_steps += 1;
            if flat_steps >= 3 {
                converged = sup_norm(&gfree) * scale < 100.0 * config.grad_tol;
                break;
            }
        } else {
            flat_steps = 0;
        }
        let gn = obj.gradient(&zn)?;
        n_grad += 1;
        let mask = |i: usize, v: f64| if active[i] { 0.0 } else { v };
        let s = DVector::from_iterator(d, (0..d).map(|i| mask(i, zn[i] - z[i])));
        let y = DVector::from_iterator(d, (0..d).map(|i| mask(i, gn[i] - g[i])));
        let sy = s.dot(&y);
        if sy > 1e-14 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(d, d);
            let left = &eye - rho * &s * y.transpose();
            let right = &eye - rho * &y * s.transpose();
            hinv = &left * &hinv * &right + rho * &s * s.transpose();
        }
        z = zn;
        f = fnew;
        g = gn;
    }
    if !converged && n_grad >= config.max_grad_evals {
        return Err(Error::Convergence {
            stage: "mle",
            message: format!(
                "gradient budget of {} evaluations exhausted",
                config.max_grad_evals
            ),
            trace: g,
        });
    }

    let theta_hat = obj.param.theta(&z);
    let rho_hat = theta_hat.rho.params().to_vec();
    let boundary = config.fixed_rho.is_none() && on_boundary(&rho_hat);
    let free_rho = config.fixed_rho.is_none() && !boundary && q > 0;
    let hessian_cov = natural_cov(&mut obj, &theta_hat, free_rho)?;
    let se: Vec<f64> = (0..hessian_cov.nrows())
        .map(|i| hessian_cov[(i, i)].max(0.0).sqrt())
        .collect();
    let loglik = -f * scale;
    Ok(MleResult {
        se_beta: se[..p].to_vec(),
        se_rho: free_rho.then(|| se[p..].to_vec()),
        theta_hat,
        hessian_cov,
        loglik,
        converged,
        boundary,
        n_loglik_evals: obj.evals,
        n_grad_evals: n_grad,
    })
}

fn on_boundary(rho: &[f64]) -> bool {
    rho.iter().any(|r| *r < EDGE) || rho.iter().sum::<f64>() > 1.0 - EDGE
}

/// Inverse of the negative finite-difference Hessian of the summed
/// log-likelihood in `(beta, rho)`.
fn natural_cov(obj: &mut Objective<'_>, theta: &Theta, with_rho: bool) -> Result<DMatrix<f64>> {
    let p = theta.beta.len();
    let mut x = theta.beta.clone();
    if with_rho {
        x.extend_from_slice(theta.rho.params());
    }
    let d = x.len();
    let kind = theta.rho.kind();
    let rho_fixed = theta.rho.params().to_vec();
    let rho_sum: f64 = rho_fixed.iter().sum();
    let scale = obj.dataset.n_clusters() as f64;
    let steps: Vec<f64> = (0..d)
        .map(|i| {
            if i < p {
                1e-4 * x[i].abs().max(1.0)
            } else {
                1e-4_f64.min(0.25 * x[i]).min(0.25 * (1.0 - rho_sum))
            }
        })
        .collect();
    let mut eval = |v: &[f64]| -> Result<f64> {
        let rho = if with_rho {
            v[p..].to_vec()
        } else {
            rho_fixed.clone()
        };
        let th = Theta {
            beta: v[..p].to_vec(),
            rho: CorrelationStructure::from_params_unchecked(kind, rho),
        };
        obj.evals += 1;
        let ll = match obj.which {
            Likelihood::Full => loglik_unchecked(obj.dataset, &th, obj.cap)?,
            Likelihood::PairwiseComposite => composite_sum(obj.dataset, &th)?,
        };
        Ok(ll / scale)
    };
    let f0 = eval(&x)?;
    let mut h = DMatrix::zeros(d, d);
    let mut v = x.clone();
    for i in 0..d {
        let hi = steps[i];
        v[i] = x[i] + hi;
        let up = eval(&v)?;
        v[i] = x[i] - hi;
        let dn = eval(&v)?;
        v[i] = x[i];
        h[(i, i)] = (up - 2.0 * f0 + dn) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let mut corner = |si: f64, sj: f64| -> Result<f64> {
                let mut w = x.clone();
                w[i] += si * hi;
                w[j] += sj * hj;
                eval(&w)
            };
            let val = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)?
                + corner(-1.0, -1.0)?)
                / (4.0 * hi * hj);
            h[(i, j)] = val;
            h[(j, i)] = val;
        }
    }
    let info = -h * scale;
    spd_inverse(&info, "observed information")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_coordinates_round_trip() {
        let param = Param {
            kind: StructureKind::NestedExchExch,
            p: 1,
            fixed: None,
        };
        let z = param.encode(&[0.4], &[0.3, 0.2]);
        let th = param.theta(&z);
        assert!((th.rho.params()[0] - 0.3).abs() < 1e-14);
        assert!((th.rho.params()[1] - 0.2).abs() < 1e-14);
        assert_eq!(th.beta, vec![0.4]);
    }

    #[test]
    fn boundary_detection() {
        assert!(on_boundary(&[0.0]));
        assert!(on_boundary(&[0.6, 0.4]));
        assert!(!on_boundary(&[0.3, 0.3]));
    }
}
