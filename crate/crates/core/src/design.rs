//! Shared domain types: experiment geometry, model parameters, contrasts.
//!
//! Arms are indexed `0..=M` with arm 0 the control condition. All
//! contrasts compare a treatment arm against arm 0.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Standard normal 97.5% quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

/// How treatment probability vectors are produced for clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AssignmentMode {
    /// Independent Dirichlet draw per cluster, then multinomial within.
    #[default]
    TwoStageDirichlet,
    /// `K` precomputed quasi-random Dirichlet draws shared by clusters.
    SobolDirichlet {
        #[serde(rename = "K")]
        k: usize,
    },
}

/// Experiment geometry and randomization intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct DesignSpec<F> {
    #[serde(rename = "J")]
    pub clusters: usize,
    #[serde(rename = "n")]
    pub cluster_size: usize,
    #[serde(rename = "M")]
    pub treatments: usize,
    /// Dirichlet concentration per arm, length `M + 1`.
    pub alpha: Vec<F>,
    #[serde(default)]
    pub mode: AssignmentMode,
}

impl<F: Scalar> DesignSpec<F> {
    /// Balanced design with every arm concentration equal to `alpha_bar`.
    pub fn balanced(clusters: usize, cluster_size: usize, treatments: usize, alpha_bar: F) -> Self {
        DesignSpec {
            clusters,
            cluster_size,
            treatments,
            alpha: vec![alpha_bar; treatments + 1],
            mode: AssignmentMode::TwoStageDirichlet,
        }
    }

    /// Balanced design parametrized by the scaled concentration `(M+1)·ᾱ`.
    pub fn balanced_scaled(
        clusters: usize,
        cluster_size: usize,
        treatments: usize,
        scaled_alpha: F,
    ) -> Self {
        let alpha_bar = scaled_alpha / F::from_count(treatments + 1);
        Self::balanced(clusters, cluster_size, treatments, alpha_bar)
    }

    pub fn with_mode(mut self, mode: AssignmentMode) -> Self {
        self.mode = mode;
        self
    }

    /// Number of arms including control.
    pub fn arms(&self) -> usize {
        self.treatments + 1
    }

    /// Common concentration if all arms share one, else `None`.
    pub fn alpha_bar(&self) -> Option<F> {
        let first = *self.alpha.first()?;
        self.alpha.iter().all(|&a| a == first).then_some(first)
    }

    pub fn validate(&self) -> Result<()> {
        validate_design(self)
    }
}

/// Checks every [`DesignSpec`] invariant.
pub fn validate_design<F: Scalar>(spec: &DesignSpec<F>) -> Result<()> {
    if spec.treatments < 1 {
        return Err(Error::EmptyArms);
    }
    if spec.clusters < 2 {
        return Err(Error::DegenerateGeometry(format!(
            "need at least 2 clusters, got J={}",
            spec.clusters
        )));
    }
    if spec.cluster_size < 2 {
        return Err(Error::DegenerateGeometry(format!(
            "need at least 2 units per cluster, got n={}",
            spec.cluster_size
        )));
    }
    if spec.alpha.len() != spec.arms() {
        return Err(Error::DimensionMismatch(format!(
            "alpha has {} entries but M+1 = {}",
            spec.alpha.len(),
            spec.arms()
        )));
    }
    if let Some(&a) = spec
        .alpha
        .iter()
        .find(|a| !(**a > F::zero() && a.is_finite()))
    {
        return Err(Error::NonPositiveAlpha(a.as_f64()));
    }
    if let AssignmentMode::SobolDirichlet { k: 0 } = spec.mode {
        return Err(Error::EmptyTable);
    }
    Ok(())
}

/// Parameters of the linear-in-means outcome model.
///
/// `delta_base[m][l - 1]` is the base slope of arm `m` outcomes on the
/// share of arm `l` in the cluster; the realized slope is that value
/// times `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct DgpParams<F> {
    pub beta: Vec<F>,
    pub delta_base: Vec<Vec<F>>,
    pub c: F,
    pub sigma2: F,
    pub rho_u: F,
}

impl<F: Scalar> DgpParams<F> {
    /// Three-arm reference model: control, a "high" arm and a "low" arm.
    pub fn reference_three_arm(c: F, rho_u: F) -> Self {
        let l = F::lit;
        DgpParams {
            beta: vec![l(5.0), l(7.5), l(2.5)],
            delta_base: vec![
                vec![l(0.5), l(-0.5)],
                vec![l(1.0), l(-1.0)],
                vec![l(2.5), l(-2.5)],
            ],
            c,
            sigma2: F::one(),
            rho_u,
        }
    }

    pub fn arms(&self) -> usize {
        self.beta.len()
    }

    pub fn treatments(&self) -> usize {
        self.beta.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let arms = self.arms();
        if arms < 2 {
            return Err(Error::EmptyArms);
        }
        if self.delta_base.len() != arms || self.delta_base.iter().any(|r| r.len() != arms - 1) {
            return Err(Error::DimensionMismatch(format!(
                "delta_base must be {}x{}",
                arms,
                arms - 1
            )));
        }
        if !(self.c >= F::zero() && self.c.is_finite()) {
            return Err(Error::OutOfRange(format!(
                "c must be nonnegative, got {}",
                self.c
            )));
        }
        if !(self.sigma2 > F::zero() && self.sigma2.is_finite()) {
            return Err(Error::OutOfRange(format!(
                "sigma2 must be positive, got {}",
                self.sigma2
            )));
        }
        if !(self.rho_u >= F::zero() && self.rho_u < F::one()) {
            return Err(Error::OutOfRange(format!(
                "rho_u must lie in [0,1), got {}",
                self.rho_u
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    LinearInMeans,
    DifferenceInMeans,
}

impl Estimator {
    pub fn short(self) -> &'static str {
        match self {
            Estimator::LinearInMeans => "lm",
            Estimator::DifferenceInMeans => "dm",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lm" | "linear_in_means" => Ok(Estimator::LinearInMeans),
            "dm" | "difference_in_means" => Ok(Estimator::DifferenceInMeans),
            other => Err(Error::Parse(format!("unknown estimator {other:?}"))),
        }
    }
}

/// Reference distribution for confidence intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    #[default]
    Normal,
    /// Student t with `J - 1` degrees of freedom.
    StudentT,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CiConfig {
    pub level: f64,
    pub reference: Reference,
}

impl Default for CiConfig {
    fn default() -> Self {
        CiConfig {
            level: 0.95,
            reference: Reference::Normal,
        }
    }
}

impl CiConfig {
    /// Two-sided critical value for a fit on `clusters` clusters.
    pub fn critical_value(&self, clusters: usize) -> f64 {
        let q = 0.5 + self.level / 2.0;
        match self.reference {
            Reference::Normal if (self.level - 0.95).abs() < 1e-15 => Z_975,
            Reference::Normal => statrs::distribution::Normal::standard().inverse_cdf(q),
            Reference::StudentT => {
                let df = clusters.saturating_sub(1).max(1) as f64;
                StudentsT::new(0.0, 1.0, df)
                    .expect("valid t")
                    .inverse_cdf(q)
            }
        }
    }
}

/// Estimated homogeneous-assignment effect of `arm` versus control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast<F> {
    pub arm: usize,
    pub estimate: F,
    pub se: F,
    pub ci_lo: F,
    pub ci_hi: F,
    pub estimator: Estimator,
    /// True when an LM contrast was requested but the own-arm slope was
    /// dropped, so the value is the difference of arm intercepts.
    pub degraded: bool,
}

impl<F: Scalar> Contrast<F> {
    pub fn covers(&self, truth: F) -> bool {
        self.ci_lo <= truth && truth <= self.ci_hi
    }
}
