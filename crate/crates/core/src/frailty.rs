//! Correlated exponential frailties and synthetic clustered binary data.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ClusterData, Dataset, Observation};
use crate::error::{Error, Result};
use crate::linalg::min_eigenvalue;
use crate::model::{CorrelationStructure, StructureKind};

const REPAIR_THRESHOLD: f64 = 1e-8;
const REPAIR_JITTER: f64 = 1e-8;

/// Gaussian-scale correlation matrix of a cluster layout and its Cholesky
/// factor, ready for sampling.
#[derive(Debug, Clone)]
pub struct GaussianFactor {
    scale: DMatrix<f64>,
    lower: DMatrix<f64>,
}

impl GaussianFactor {
    pub fn scale_matrix(&self) -> &DMatrix<f64> {
        &self.scale
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.scale.nrows()
    }

    /// One frailty vector; see [`draw_frailties`].
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        draw_frailties(self, rng)
    }
}

/// Builds `C` with `C_jk = sqrt(rho_jk)` for `cluster`'s layout and factors it.
/// Nearly singular `C` gets a `1e-8` diagonal jitter before factoring.
pub fn gaussian_scale_factor(
    structure: &CorrelationStructure,
    cluster: &ClusterData,
) -> Result<GaussianFactor> {
    let scale = structure.gaussian_scale_matrix(cluster)?;
    let n = scale.nrows();
    let mut work = scale.clone();
    if n > 1 && min_eigenvalue(&scale) < REPAIR_THRESHOLD {
        work += DMatrix::identity(n, n) * REPAIR_JITTER;
        work /= 1.0 + REPAIR_JITTER;
    }
    let lower = work
        .cholesky()
        .ok_or_else(|| {
            Error::Structure(format!(
                "Gaussian-scale matrix for layout {:?} cannot be factored",
                cluster.layout_key()
            ))
        })?
        .l();
    Ok(GaussianFactor { scale, lower })
}

/// `Z_k = (W1_k^2 + W2_k^2) / 2` with `W1, W2` independent `N(0, C)`:
/// standard exponential margins and `cor(Z) = C o C`.
pub fn draw_frailties<R: Rng + ?Sized>(factor: &GaussianFactor, rng: &mut R) -> Vec<f64> {
    let n = factor.dim();
    let z1 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let z2 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w1 = &factor.lower * z1;
    let w2 = &factor.lower * z2;
    w1.iter()
        .zip(w2.iter())
        .map(|(a, b)| 0.5 * (a * a + b * b))
        .collect()
}

/// SplitMix64 finalizer applied to `(master, index)`; used to give every
/// replicate an independent dataset seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(0x9E37_79B9_7F4A_7C15_u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DgpKind {
    /// Outcomes drawn from the exponential-frailty conditional model.
    FrailtyModel,
    /// One logistic latent variable shared by the whole cluster; correct
    /// logistic margins, wrong joint law.
    MisspecifiedLatentLogistic,
}

/// Categorical law over cluster sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SizeLaw {
    TwoLevel(Vec<(usize, f64)>),
    ThreeLevel {
        subjects: Vec<(usize, f64)>,
        observations: Vec<(usize, f64)>,
    },
}

fn check_law(law: &[(usize, f64)], what: &str) -> Result<()> {
    if law.is_empty()
        || law
            .iter()
            .any(|&(n, p)| n == 0 || !(0.0..=1.0).contains(&p))
    {
        return Err(Error::Argument(format!("invalid {what} size law")));
    }
    let total: f64 = law.iter().map(|(_, p)| p).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "{what} size probabilities sum to {total}, not 1"
        )));
    }
    Ok(())
}

fn sample_law<R: Rng + ?Sized>(law: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(n, p) in law {
        acc += p;
        if u < acc {
            return n;
        }
    }
    law[law.len() - 1].0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub kind: DgpKind,
    pub beta_true: Vec<f64>,
    pub structure_true: CorrelationStructure,
    pub cluster_count: usize,
    pub size_law: SizeLaw,
    pub covariate_sd: f64,
    pub seed: u64,
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cluster_count == 0 {
            return Err(Error::Argument("cluster_count must be at least 1".into()));
        }
        if self.beta_true.is_empty() || self.beta_true.iter().any(|b| !b.is_finite()) {
            return Err(Error::Argument(
                "beta_true must be finite and non-empty".into(),
            ));
        }
        if !(self.covariate_sd > 0.0 && self.covariate_sd.is_finite()) {
            return Err(Error::Argument("covariate_sd must be positive".into()));
        }
        match &self.size_law {
            SizeLaw::TwoLevel(law) => {
                check_law(law, "cluster")?;
                if self.structure_true.kind().is_nested() {
                    return Err(Error::Argument(
                        "nested structures need a three-level size law".into(),
                    ));
                }
            }
            SizeLaw::ThreeLevel {
                subjects,
                observations,
            } => {
                check_law(subjects, "subject")?;
                check_law(observations, "observation")?;
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_cluster_count(mut self, m: usize) -> Self {
        self.cluster_count = m;
        self
    }
}

/// Generates a dataset; a pure function of `config`. Each cluster draws from
/// its own ChaCha stream, so the output does not depend on generation order.
pub fn simulate_dataset(config: &DgpConfig) -> Result<Dataset> {
    config.validate()?;
    let p = config.beta_true.len();
    let mut names = vec!["(Intercept)".to_string()];
    names.extend((1..p).map(|j| format!("x{j}")));
    let mut factors: HashMap<Vec<(i64, i64)>, GaussianFactor> = HashMap::new();
    let mut clusters = Vec::with_capacity(config.cluster_count);
    for i in 0..config.cluster_count {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        let mut observations = Vec::new();
        match &config.size_law {
            SizeLaw::TwoLevel(law) => {
                let n = sample_law(law, &mut rng);
                for j in 0..n {
                    observations.push(Observation::new(Vec::new(), 0, j as i64));
                }
            }
            SizeLaw::ThreeLevel {
                subjects,
                observations: per,
            } => {
                let ns = sample_law(subjects, &mut rng);
                for s in 0..ns {
                    let n = sample_law(per, &mut rng);
                    for j in 0..n {
                        observations
                            .push(Observation::new(Vec::new(), 0, j as i64).with_subject(s as i64));
                    }
                }
            }
        }
        for o in observations.iter_mut() {
            let mut x = Vec::with_capacity(p);
            x.push(1.0);
            for _ in 1..p {
                let z: f64 = rng.sample(StandardNormal);
                x.push(config.covariate_sd * z);
            }
            o.covariates = x;
        }
        match config.kind {
            DgpKind::FrailtyModel => {
                let shell = ClusterData::new(i as i64, observations.clone())?;
                let key = shell.layout_key();
                if !factors.contains_key(&key) {
                    let f = gaussian_scale_factor(&config.structure_true, &shell)?;
                    factors.insert(key.clone(), f);
                }
                let frailty = factors[&key].draw(&mut rng);
                for (o, a) in observations.iter_mut().zip(frailty) {
                    let eta = o.linear_predictor(&config.beta_true);
                    let prob_one = (-a * (-eta).exp()).exp();
                    let u: f64 = rng.random();
                    o.outcome = u8::from(u < prob_one);
                }
            }
            DgpKind::MisspecifiedLatentLogistic => {
                let u: f64 = rng.sample(Open01);
                let latent = u.ln() - (-u).ln_1p();
                for o in observations.iter_mut() {
                    let eta = o.linear_predictor(&config.beta_true);
                    o.outcome = u8::from(eta + latent > 0.0);
                }
            }
        }
        clusters.push(ClusterData::new(i as i64, observations)?);
    }
    Dataset::new(clusters, names, true)
}

/// Simulation designs with a fixed `beta = (1, -1.2)`, 200 clusters and a
/// single `N(0, 2^2)` covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Two-level, sizes 5-7, exchangeable frailties.
    Table1a,
    /// Two-level, sizes 5-7, AR(1) frailties.
    Table1b,
    /// Three-level, nested exchangeable frailties.
    Table2,
    /// Two-level, sizes 5-7, shared latent logistic variable.
    Table3,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Table1a => "table1a",
            Scenario::Table1b => "table1b",
            Scenario::Table2 => "table2",
            Scenario::Table3 => "table3",
        }
    }

    /// Correlation structure used when fitting data from this scenario.
    pub fn fit_kind(self) -> StructureKind {
        match self {
            Scenario::Table1a | Scenario::Table3 => StructureKind::Exchangeable,
            Scenario::Table1b => StructureKind::Ar1,
            Scenario::Table2 => StructureKind::NestedExchExch,
        }
    }

    pub fn is_misspecified(self) -> bool {
        self == Scenario::Table3
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "table1a" => Ok(Scenario::Table1a),
            "table1b" => Ok(Scenario::Table1b),
            "table2" => Ok(Scenario::Table2),
            "table3" => Ok(Scenario::Table3),
            other => Err(Error::Argument(format!("unknown scenario '{other}'"))),
        }
    }
}

pub const PRESET_BETA: [f64; 2] = [1.0, -1.2];
pub const PRESET_CLUSTERS: usize = 200;
pub const PRESET_COVARIATE_SD: f64 = 2.0;

pub fn preset_scenario(name: Scenario, rho_values: &[f64]) -> Result<DgpConfig> {
    let sizes_5_to_7 = SizeLaw::TwoLevel(vec![(5, 1.0 / 3.0), (6, 1.0 / 3.0), (7, 1.0 / 3.0)]);
    let (kind, structure, size_law) = match name {
        Scenario::Table1a => (
            DgpKind::FrailtyModel,
            CorrelationStructure::new(StructureKind::Exchangeable, rho_values.to_vec())?,
            sizes_5_to_7,
        ),
        Scenario::Table1b => (
            DgpKind::FrailtyModel,
            CorrelationStructure::new(StructureKind::Ar1, rho_values.to_vec())?,
            sizes_5_to_7,
        ),
        Scenario::Table2 => (
            DgpKind::FrailtyModel,
            CorrelationStructure::new(StructureKind::NestedExchExch, rho_values.to_vec())?,
            SizeLaw::ThreeLevel {
                subjects: vec![(2, 0.8), (3, 0.2)],
                observations: vec![(2, 0.8), (3, 0.2)],
            },
        ),
        Scenario::Table3 => {
            if !rho_values.is_empty() {
                return Err(Error::Argument(
                    "table3 uses the latent logistic design and takes no rho".into(),
                ));
            }
            (
                DgpKind::MisspecifiedLatentLogistic,
                CorrelationStructure::independence(),
                sizes_5_to_7,
            )
        }
    };
    Ok(DgpConfig {
        kind,
        beta_true: PRESET_BETA.to_vec(),
        structure_true: structure,
        cluster_count: PRESET_CLUSTERS,
        size_law,
        covariate_sd: PRESET_COVARIATE_SD,
        seed: 0,
    })
}
