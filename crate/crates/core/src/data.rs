//! Clustered binary data containers.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One binary outcome together with its covariate row and layout labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Covariate row; the leading entry is the intercept column when present.
    pub covariates: Vec<f64>,
    pub outcome: u8,
    /// Time/order index used for AR(1) lags.
    pub position: i64,
    /// Level-two unit for three-level data.
    pub subject: Option<i64>,
}

impl Observation {
    pub fn new(covariates: Vec<f64>, outcome: u8, position: i64) -> Self {
        Self {
            covariates,
            outcome,
            position,
            subject: None,
        }
    }

    pub fn with_subject(mut self, subject: i64) -> Self {
        self.subject = Some(subject);
        self
    }

    pub fn linear_predictor(&self, beta: &[f64]) -> f64 {
        self.covariates.iter().zip(beta).map(|(x, b)| x * b).sum()
    }
}

/// All observations of one independent cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterData {
    pub label: i64,
    observations: Vec<Observation>,
}

impl ClusterData {
    pub fn new(label: i64, observations: Vec<Observation>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::Argument(format!(
                "cluster {label} has no observations"
            )));
        }
        let p = observations[0].covariates.len();
        let three_level = observations[0].subject.is_some();
        let mut seen = HashSet::new();
        for obs in &observations {
            if obs.outcome > 1 {
                return Err(Error::Argument(format!(
                    "cluster {label}: outcome {} is not binary",
                    obs.outcome
                )));
            }
            if obs.covariates.len() != p {
                return Err(Error::Argument(format!(
                    "cluster {label}: covariate rows of unequal length"
                )));
            }
            if obs.covariates.iter().any(|x| !x.is_finite()) {
                return Err(Error::Argument(format!(
                    "cluster {label}: non-finite covariate"
                )));
            }
            if obs.subject.is_some() != three_level {
                return Err(Error::Argument(format!(
                    "cluster {label}: subject labels must be present on all observations or none"
                )));
            }
            if !seen.insert((obs.subject, obs.position)) {
                return Err(Error::Argument(format!(
                    "cluster {label}: duplicate position {} within unit",
                    obs.position
                )));
            }
        }
        Ok(Self {
            label,
            observations,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn is_three_level(&self) -> bool {
        self.observations[0].subject.is_some()
    }

    pub fn n_covariates(&self) -> usize {
        self.observations[0].covariates.len()
    }

    pub fn n_pairs(&self) -> usize {
        let n = self.len();
        n * (n - 1) / 2
    }

    pub fn linear_predictors(&self, beta: &[f64]) -> Vec<f64> {
        self.observations
            .iter()
            .map(|o| o.linear_predictor(beta))
            .collect()
    }

    /// Canonical description of the cluster's shape: subject index (in order
    /// of first appearance) and position relative to the cluster minimum.
    pub fn layout_key(&self) -> Vec<(i64, i64)> {
        let min_pos = self
            .observations
            .iter()
            .map(|o| o.position)
            .min()
            .unwrap_or(0);
        let mut subjects: Vec<i64> = Vec::new();
        self.observations
            .iter()
            .map(|o| {
                let s = match o.subject {
                    Some(s) => match subjects.iter().position(|&x| x == s) {
                        Some(i) => i as i64,
                        None => {
                            subjects.push(s);
                            (subjects.len() - 1) as i64
                        }
                    },
                    None => -1,
                };
                (s, o.position - min_pos)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    TwoLevel,
    ThreeLevel,
}

/// A collection of independent clusters sharing one covariate layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    clusters: Vec<ClusterData>,
    covariate_names: Vec<String>,
    has_intercept: bool,
}

impl Dataset {
    pub fn new(
        clusters: Vec<ClusterData>,
        covariate_names: Vec<String>,
        has_intercept: bool,
    ) -> Result<Self> {
        let first = clusters
            .first()
            .ok_or_else(|| Error::Argument("dataset has no clusters".into()))?;
        let p = first.n_covariates();
        let three = first.is_three_level();
        if covariate_names.len() != p {
            return Err(Error::Argument(format!(
                "{} covariate names for {} covariates",
                covariate_names.len(),
                p
            )));
        }
        for c in &clusters {
            if c.n_covariates() != p {
                return Err(Error::Argument(format!(
                    "cluster {} has {} covariates, expected {p}",
                    c.label,
                    c.n_covariates()
                )));
            }
            if c.is_three_level() != three {
                return Err(Error::Argument(
                    "subject labels must be present in every cluster or none".into(),
                ));
            }
        }
        Ok(Self {
            clusters,
            covariate_names,
            has_intercept,
        })
    }

    pub fn clusters(&self) -> &[ClusterData] {
        &self.clusters
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn has_intercept(&self) -> bool {
        self.has_intercept
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_observations(&self) -> usize {
        self.clusters.iter().map(|c| c.len()).sum()
    }

    pub fn n_pairs(&self) -> usize {
        self.clusters.iter().map(|c| c.n_pairs()).sum()
    }

    pub fn max_cluster_size(&self) -> usize {
        self.clusters.iter().map(|c| c.len()).max().unwrap_or(0)
    }

    pub fn mode(&self) -> Mode {
        if self.clusters[0].is_three_level() {
            Mode::ThreeLevel
        } else {
            Mode::TwoLevel
        }
    }

    /// Same data with clusters in a different order.
    pub fn with_clusters(&self, clusters: Vec<ClusterData>) -> Result<Self> {
        Self::new(clusters, self.covariate_names.clone(), self.has_intercept)
    }
}
