//! OLS estimation of arm effects with cluster-robust inference.
//!
//! Two layouts share one fitting path:
//!
//! * linear-in-means (LM): a `Beta(m)` indicator per arm plus
//!   `Delta(m, l) = p_{j,l}·1{A = m}` for every arm `m` and `l = 1..M`;
//! * difference-in-means (DM): the `Beta(m)` indicators only.
//!
//! `Beta` columns are pivot-protected, so when the design is degenerate
//! (clusters nearly homogeneous) the QR drops `Delta` columns and the LM
//! fit falls back to the DM fit.

mod qr;

pub use qr::{pivoted_qr, PivotedQr};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::design::{Contrast, Estimator};
use crate::dgp::OutcomeMatrix;
use crate::error::{Error, Result};
use crate::randomize::AssignmentMatrix;
use crate::scalar::Scalar;

/// Default relative rank tolerance.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ColumnTag {
    Beta(usize),
    Delta(usize, usize),
}

impl fmt::Display for ColumnTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnTag::Beta(m) => write!(f, "beta_{m}"),
            ColumnTag::Delta(m, l) => write!(f, "delta_{m}_{l}"),
        }
    }
}

impl FromStr for ColumnTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad column tag {s:?}"));
        let parts: Vec<&str> = s.split('_').collect();
        let num = |x: &str| x.parse::<usize>().map_err(|_| bad());
        match parts.as_slice() {
            ["beta", m] => Ok(ColumnTag::Beta(num(m)?)),
            ["delta", m, l] => Ok(ColumnTag::Delta(num(m)?, num(l)?)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for ColumnTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ColumnTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Regression design in column-major form, rows ordered cluster by cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix<F> {
    pub columns: Vec<Vec<F>>,
    pub column_tags: Vec<ColumnTag>,
    pub cluster_index: Vec<usize>,
    pub layout: Estimator,
}

impl<F: Scalar> DesignMatrix<F> {
    pub fn rows(&self) -> usize {
        self.cluster_index.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_index.iter().max().map_or(0, |&m| m + 1)
    }

    /// Number of `Beta` columns; these lead the column list.
    fn protected(&self) -> usize {
        self.column_tags
            .iter()
            .filter(|t| matches!(t, ColumnTag::Beta(_)))
            .count()
    }

    pub fn row(&self, i: usize) -> Vec<F> {
        self.columns.iter().map(|c| c[i]).collect()
    }
}

fn beta_columns<F: Scalar>(assignment: &AssignmentMatrix<F>) -> (Vec<Vec<F>>, Vec<usize>) {
    let n = assignment.total_units();
    let mut cols = vec![vec![F::zero(); n]; assignment.arms()];
    let mut cluster_index = Vec::with_capacity(n);
    let mut row = 0;
    for (j, labels) in assignment.labels().iter().enumerate() {
        for &a in labels {
            cols[a][row] = F::one();
            cluster_index.push(j);
            row += 1;
        }
    }
    (cols, cluster_index)
}

/// Linear-in-means layout: `Beta(0..=M)` then `Delta(m, l)` for
/// `m = 0..=M`, `l = 1..=M`. No global intercept.
pub fn build_lm_matrix<F: Scalar>(assignment: &AssignmentMatrix<F>) -> DesignMatrix<F> {
    let arms = assignment.arms();
    let (mut columns, cluster_index) = beta_columns(assignment);
    let mut column_tags: Vec<ColumnTag> = (0..arms).map(ColumnTag::Beta).collect();
    let n = cluster_index.len();
    for m in 0..arms {
        for l in 1..arms {
            let mut col = vec![F::zero(); n];
            let mut row = 0;
            for (j, labels) in assignment.labels().iter().enumerate() {
                let share = assignment.proportion(j, l);
                for &a in labels {
                    if a == m {
                        col[row] = share;
                    }
                    row += 1;
                }
            }
            columns.push(col);
            column_tags.push(ColumnTag::Delta(m, l));
        }
    }
    DesignMatrix {
        columns,
        column_tags,
        cluster_index,
        layout: Estimator::LinearInMeans,
    }
}

/// Difference-in-means layout: one indicator per arm.
pub fn build_dm_matrix<F: Scalar>(assignment: &AssignmentMatrix<F>) -> DesignMatrix<F> {
    let (columns, cluster_index) = beta_columns(assignment);
    let column_tags = (0..assignment.arms()).map(ColumnTag::Beta).collect();
    DesignMatrix {
        columns,
        column_tags,
        cluster_index,
        layout: Estimator::DifferenceInMeans,
    }
}

/// Small-sample factor for the cluster-robust sandwich.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SmallSample {
    CR0,
    /// `J/(J-1) · (N-1)/(N-P)`.
    #[default]
    CR1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<F> {
    pub layout: Estimator,
    /// Coefficients of retained columns, in original column order.
    pub coefficients: Vec<F>,
    pub retained: Vec<ColumnTag>,
    pub dropped: Vec<ColumnTag>,
    pub residuals: Vec<F>,
    /// Cluster-robust covariance over retained columns.
    pub vcov: Vec<Vec<F>>,
    pub correction: SmallSample,
    pub n_clusters: usize,
    pub n_obs: usize,
    /// `(X_rᵀX_r)⁻¹` over retained columns.
    pub bread: Vec<Vec<F>>,
    /// Per-cluster scores `X_jᵀ ê_j` over retained columns.
    pub cluster_scores: Vec<Vec<F>>,
}

impl<F: Scalar> FitResult<F> {
    pub fn position(&self, tag: ColumnTag) -> Option<usize> {
        self.retained.iter().position(|&t| t == tag)
    }

    pub fn coefficient(&self, tag: ColumnTag) -> Option<F> {
        self.position(tag).map(|i| self.coefficients[i])
    }

    /// Same fit with covariance recomputed under `correction`.
    pub fn with_correction(mut self, correction: SmallSample) -> Result<Self> {
        self.vcov = cluster_robust_vcov(&self, correction)?;
        self.correction = correction;
        Ok(self)
    }

    /// `√(λᵀ V λ)` for a contrast vector over retained columns.
    pub fn contrast_se(&self, lambda: &[F]) -> F {
        let mut q = F::zero();
        for (i, &li) in lambda.iter().enumerate() {
            if li == F::zero() {
                continue;
            }
            for (j, &lj) in lambda.iter().enumerate() {
                q = q + li * self.vcov[i][j] * lj;
            }
        }
        q.max(F::zero()).sqrt()
    }

    /// JSON export: coefficients keyed by tag, dropped tags, and the
    /// covariance as a dense lower triangle in `retained` order.
    pub fn to_json(&self) -> serde_json::Value {
        let coefficients: BTreeMap<String, f64> = self
            .retained
            .iter()
            .zip(&self.coefficients)
            .map(|(t, c)| (t.to_string(), c.as_f64()))
            .collect();
        let lower: Vec<Vec<f64>> = (0..self.retained.len())
            .map(|i| (0..=i).map(|j| self.vcov[i][j].as_f64()).collect())
            .collect();
        serde_json::json!({
            "layout": self.layout,
            "coefficients": coefficients,
            "retained": self.retained,
            "dropped": self.dropped,
            "vcov_lower": lower,
            "correction": self.correction,
            "n_clusters": self.n_clusters,
            "n_obs": self.n_obs,
        })
    }
}

/// Least squares of `y` on `x` with rank handling and CR1 covariance.
pub fn ols_fit<F: Scalar>(
    x: &DesignMatrix<F>,
    y: &OutcomeMatrix<F>,
    tol: F,
) -> Result<FitResult<F>> {
    ols_fit_flat(x, &y.flatten(), tol, SmallSample::CR1)
}

/// [`ols_fit`] on a flat response vector with an explicit correction.
pub fn ols_fit_flat<F: Scalar>(
    x: &DesignMatrix<F>,
    y: &[F],
    tol: F,
    correction: SmallSample,
) -> Result<FitResult<F>> {
    let n = x.rows();
    if y.len() != n || x.columns.iter().any(|c| c.len() != n) {
        return Err(Error::DimensionMismatch(format!(
            "design has {n} rows, response has {}",
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) || x.columns.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let qr = pivoted_qr(&x.columns, y, x.protected(), tol);
    if qr.rank() == 0 {
        return Err(Error::AllColumnsDropped);
    }
    let coef_pivot = qr.solve();
    let gram_pivot = qr.gram_inverse();

    // back to original column order
    let mut idx: Vec<usize> = (0..qr.rank()).collect();
    idx.sort_by_key(|&i| qr.order[i]);
    let cols: Vec<usize> = idx.iter().map(|&i| qr.order[i]).collect();
    let coefficients: Vec<F> = idx.iter().map(|&i| coef_pivot[i]).collect();
    let bread: Vec<Vec<F>> = idx
        .iter()
        .map(|&a| idx.iter().map(|&b| gram_pivot[a][b]).collect())
        .collect();
    let retained: Vec<ColumnTag> = cols.iter().map(|&c| x.column_tags[c]).collect();
    let mut dropped_cols = qr.dropped.clone();
    dropped_cols.sort_unstable();
    let dropped = dropped_cols.iter().map(|&c| x.column_tags[c]).collect();

    let mut residuals = y.to_vec();
    for (&c, &b) in cols.iter().zip(&coefficients) {
        for (r, &xv) in residuals.iter_mut().zip(&x.columns[c]) {
            *r = *r - xv * b;
        }
    }
    let n_clusters = x.n_clusters();
    let mut cluster_scores = vec![vec![F::zero(); cols.len()]; n_clusters];
    for (k, &c) in cols.iter().enumerate() {
        for ((&xv, &e), &j) in x.columns[c].iter().zip(&residuals).zip(&x.cluster_index) {
            cluster_scores[j][k] = cluster_scores[j][k] + xv * e;
        }
    }

    let mut fit = FitResult {
        layout: x.layout,
        coefficients,
        retained,
        dropped,
        residuals,
        vcov: Vec::new(),
        correction,
        n_clusters,
        n_obs: n,
        bread,
        cluster_scores,
    };
    fit.vcov = cluster_robust_vcov(&fit, correction)?;
    Ok(fit)
}

/// Cluster-robust sandwich `B (Σ_j s_j s_jᵀ) B` with `B = (XᵀX)⁻¹`,
/// scaled by the small-sample factor.
pub fn cluster_robust_vcov<F: Scalar>(
    fit: &FitResult<F>,
    correction: SmallSample,
) -> Result<Vec<Vec<F>>> {
    let k = fit.retained.len();
    if fit.n_clusters < 2 {
        return Err(Error::DegenerateGeometry(
            "cluster-robust variance needs J >= 2".into(),
        ));
    }
    if fit.bread.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::SingularGram);
    }
    let mut meat = vec![vec![F::zero(); k]; k];
    for s in &fit.cluster_scores {
        for a in 0..k {
            for b in 0..=a {
                meat[a][b] = meat[a][b] + s[a] * s[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            meat[b][a] = meat[a][b];
        }
    }
    let scale = match correction {
        SmallSample::CR0 => F::one(),
        SmallSample::CR1 => {
            let j = F::from_count(fit.n_clusters);
            let n = F::from_count(fit.n_obs);
            let p = F::from_count(k);
            if fit.n_obs <= k {
                return Err(Error::DegenerateGeometry("CR1 needs N > P".into()));
            }
            j / (j - F::one()) * (n - F::one()) / (n - p)
        }
    };
    let b = &fit.bread;
    let mut bm = vec![vec![F::zero(); k]; k];
    for i in 0..k {
        for j in 0..k {
            let mut s = F::zero();
            for l in 0..k {
                s = s + b[i][l] * meat[l][j];
            }
            bm[i][j] = s;
        }
    }
    let mut v = vec![vec![F::zero(); k]; k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = F::zero();
            for l in 0..k {
                s = s + bm[i][l] * b[l][j];
            }
            v[i][j] = s * scale;
            v[j][i] = s * scale;
        }
    }
    Ok(v)
}

fn contrast_from<F: Scalar>(
    fit: &FitResult<F>,
    arm: usize,
    lambda: Vec<F>,
    z: F,
    estimator: Estimator,
    degraded: bool,
) -> Contrast<F> {
    let estimate = lambda
        .iter()
        .zip(&fit.coefficients)
        .fold(F::zero(), |a, (&l, &b)| a + l * b);
    let se = fit.contrast_se(&lambda);
    Contrast {
        arm,
        estimate,
        se,
        ci_lo: estimate - z * se,
        ci_hi: estimate + z * se,
        estimator,
        degraded,
    }
}

fn beta_position<F: Scalar>(fit: &FitResult<F>, m: usize) -> Result<usize> {
    fit.position(ColumnTag::Beta(m))
        .ok_or_else(|| Error::MissingBetaColumn(ColumnTag::Beta(m).to_string()))
}

/// LM contrast `β_m + δ_{m,m} − β_0`. A dropped `δ_{m,m}` contributes
/// zero and the result is flagged as degraded.
pub fn haate_contrast_lm<F: Scalar>(fit: &FitResult<F>, m: usize, z: F) -> Result<Contrast<F>> {
    if m == 0 {
        return Err(Error::IndexOutOfRange("contrast arm must be >= 1".into()));
    }
    let mut lambda = vec![F::zero(); fit.retained.len()];
    lambda[beta_position(fit, m)?] = F::one();
    lambda[beta_position(fit, 0)?] = -F::one();
    let own = fit.position(ColumnTag::Delta(m, m));
    if let Some(i) = own {
        lambda[i] = F::one();
    }
    Ok(contrast_from(
        fit,
        m,
        lambda,
        z,
        Estimator::LinearInMeans,
        own.is_none(),
    ))
}

/// DM contrast `β_m − β_0`.
pub fn haate_contrast_dm<F: Scalar>(fit: &FitResult<F>, m: usize, z: F) -> Result<Contrast<F>> {
    if m == 0 {
        return Err(Error::IndexOutOfRange("contrast arm must be >= 1".into()));
    }
    let mut lambda = vec![F::zero(); fit.retained.len()];
    lambda[beta_position(fit, m)?] = F::one();
    lambda[beta_position(fit, 0)?] = -F::one();
    Ok(contrast_from(
        fit,
        m,
        lambda,
        z,
        Estimator::DifferenceInMeans,
        false,
    ))
}

/// Ratio of means with a delta-method standard error.
///
/// Uses `se² = var_t/μ_c² + μ_t²·var_c/μ_c⁴ − 2μ_t·cov/μ_c³`, which equals
/// `ratio²·(var_t/μ_t² + var_c/μ_c² − 2cov/(μ_tμ_c))` and stays defined
/// at `μ_t = 0`.
pub fn ratio_effect<F: Scalar>(
    mean_t: F,
    mean_c: F,
    var_t: F,
    var_c: F,
    cov_tc: F,
) -> Result<(F, F)> {
    if mean_c == F::zero() {
        return Err(Error::ZeroDenominator);
    }
    let ratio = mean_t / mean_c;
    let c2 = mean_c * mean_c;
    let two = F::one() + F::one();
    let v =
        var_t / c2 + mean_t * mean_t * var_c / (c2 * c2) - two * mean_t * cov_tc / (c2 * mean_c);
    Ok((ratio, v.max(F::zero()).sqrt()))
}
