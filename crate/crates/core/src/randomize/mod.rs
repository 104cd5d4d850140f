//! Two-stage Dirichlet-multinomial randomization.
//!
//! Stage one draws a probability vector `π_j ~ Dirichlet(α)` per cluster;
//! stage two assigns each unit an arm i.i.d. from `π_j`. The common
//! concentration `ᾱ` moves the design between cluster-level
//! randomization (`ᾱ → 0`) and unit-level randomization (`ᾱ → ∞`).

mod assignment;
pub mod gamma;
pub mod sobol;

pub use assignment::{index_ids, AssignmentMatrix};
pub use sobol::{
    assign_from_table, build_sobol_table, map_to_simplex, sobol_table, SobolDrawTable,
    SobolSequence, MAX_SOBOL_DIMENSION,
};

use rand::Rng;

use crate::design::{validate_design, AssignmentMode, DesignSpec};
use crate::error::{Error, Result};
use crate::rng::{keyed_hash, RngStream};
use crate::scalar::Scalar;

/// Smallest probability a Dirichlet coordinate is allowed to take.
pub const PROB_FLOOR: f64 = 1e-300;

/// Intra-cluster correlation of treatment, `1/√((M+1)ᾱ + 1)`.
pub fn treatment_icc<F: Scalar>(alpha_bar: F, treatments: usize) -> Result<F> {
    if !(alpha_bar > F::zero()) {
        return Err(Error::NonPositiveAlpha(alpha_bar.as_f64()));
    }
    let scaled = F::from_count(treatments + 1) * alpha_bar;
    Ok((scaled + F::one()).sqrt().recip())
}

/// Inverse of [`treatment_icc`]: the `ᾱ` giving correlation `rho`.
pub fn alpha_for_icc<F: Scalar>(rho: F, treatments: usize) -> Result<F> {
    if !(rho > F::zero() && rho < F::one()) {
        return Err(Error::OutOfRange(format!(
            "target ICC must lie in (0,1), got {rho}"
        )));
    }
    Ok((rho.powi(2).recip() - F::one()) / F::from_count(treatments + 1))
}

/// Correlation between two units' indicators for one arm under the
/// Dirichlet-multinomial, `1/((M+1)ᾱ + 1)`.
pub fn dirichlet_multinomial_icc<F: Scalar>(alpha_bar: F, treatments: usize) -> Result<F> {
    if !(alpha_bar > F::zero()) {
        return Err(Error::NonPositiveAlpha(alpha_bar.as_f64()));
    }
    Ok((F::from_count(treatments + 1) * alpha_bar + F::one()).recip())
}

/// One Dirichlet(`alpha`) draw from a fresh generator on `stream`.
pub fn draw_dirichlet<F: Scalar>(alpha: &[F], stream: RngStream) -> Result<Vec<F>> {
    let mut rng = stream.rng();
    dirichlet_with(alpha, &mut rng)
}

/// Dirichlet draw by normalized Gamma(α_m, 1) variates, computed in log
/// space and floored at [`PROB_FLOOR`].
pub fn dirichlet_with<F: Scalar, R: Rng + ?Sized>(alpha: &[F], rng: &mut R) -> Result<Vec<F>> {
    if let Some(&a) = alpha.iter().find(|a| !(**a > F::zero())) {
        return Err(Error::NonPositiveAlpha(a.as_f64()));
    }
    let logs: Vec<f64> = alpha
        .iter()
        .map(|a| gamma::sample_ln_gamma(a.as_f64(), rng))
        .collect();
    Ok(normalize_log_weights(&logs)
        .into_iter()
        .map(F::lit)
        .collect())
}

pub(crate) fn normalize_log_weights(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| (x / total).max(PROB_FLOOR)).collect()
}

/// Draws one arm from `probs` (which need not be exactly normalized).
pub(crate) fn categorical<R: Rng + ?Sized>(cumulative: &[f64], rng: &mut R) -> usize {
    let total = *cumulative.last().expect("nonempty");
    let u = rng.random::<f64>() * total;
    cumulative
        .iter()
        .position(|&c| u < c)
        .unwrap_or(cumulative.len() - 1)
}

pub(crate) fn cumulative<F: Scalar>(probs: &[F]) -> Vec<f64> {
    let mut acc = 0.0;
    probs
        .iter()
        .map(|p| {
            acc += p.as_f64();
            acc
        })
        .collect()
}

/// Two-stage assignment for `spec` (mode must be `TwoStageDirichlet`).
pub fn assign_two_stage<F: Scalar>(
    spec: &DesignSpec<F>,
    stream: RngStream,
) -> Result<AssignmentMatrix<F>> {
    validate_design(spec)?;
    if spec.mode != AssignmentMode::TwoStageDirichlet {
        return Err(Error::OutOfRange(
            "assign_two_stage needs mode two_stage_dirichlet".into(),
        ));
    }
    let mut rng = stream.rng();
    let mut labels = Vec::with_capacity(spec.clusters);
    let mut probs = Vec::with_capacity(spec.clusters);
    for _ in 0..spec.clusters {
        let pi = dirichlet_with(&spec.alpha, &mut rng)?;
        let cum = cumulative(&pi);
        labels.push(
            (0..spec.cluster_size)
                .map(|_| categorical(&cum, &mut rng))
                .collect(),
        );
        probs.push(pi);
    }
    AssignmentMatrix::new(spec.arms(), index_ids(spec.clusters), labels, probs)
}

/// Deployment-path two-stage assignment over named clusters of any size.
///
/// Each cluster draws from a stream derived from its identifier hash, so
/// labels do not depend on the order of `cluster_ids`.
pub fn assign_two_stage_ids<F: Scalar, S: AsRef<str>>(
    cluster_ids: &[S],
    unit_counts: &[usize],
    alpha: &[F],
    stream: RngStream,
) -> Result<AssignmentMatrix<F>> {
    if alpha.len() < 2 {
        return Err(Error::EmptyArms);
    }
    if cluster_ids.len() != unit_counts.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} cluster ids but {} unit counts",
            cluster_ids.len(),
            unit_counts.len()
        )));
    }
    if cluster_ids.is_empty() {
        return Err(Error::EmptyInput("no clusters".into()));
    }
    if let Some(j) = unit_counts.iter().position(|&n| n == 0) {
        return Err(Error::DegenerateGeometry(format!(
            "cluster {j} has no units"
        )));
    }
    let mut labels = Vec::with_capacity(cluster_ids.len());
    let mut probs = Vec::with_capacity(cluster_ids.len());
    for (id, &n) in cluster_ids.iter().zip(unit_counts) {
        let h = keyed_hash(stream.seed, id.as_ref().as_bytes());
        let mut rng = stream.derive(h).rng();
        let pi = dirichlet_with(alpha, &mut rng)?;
        let cum = cumulative(&pi);
        labels.push((0..n).map(|_| categorical(&cum, &mut rng)).collect());
        probs.push(pi);
    }
    AssignmentMatrix::new(
        alpha.len(),
        cluster_ids.iter().map(|s| s.as_ref().to_string()).collect(),
        labels,
        probs,
    )
}

/// Assignment following `spec.mode`: fresh Dirichlet draws, or a Sobol
/// table of `K` rows shared across clusters.
pub fn assign<F: Scalar>(spec: &DesignSpec<F>, stream: RngStream) -> Result<AssignmentMatrix<F>> {
    match spec.mode {
        AssignmentMode::TwoStageDirichlet => assign_two_stage(spec, stream),
        AssignmentMode::SobolDirichlet { k } => {
            validate_design(spec)?;
            let table = build_sobol_table(spec, k)?;
            let ids = index_ids(spec.clusters);
            assign_from_table(
                &ids,
                &vec![spec.cluster_size; spec.clusters],
                &table,
                stream,
            )
        }
    }
}

/// One-way ANOVA estimate of the intra-cluster correlation of the
/// indicator `1{A = arm}`, clamped to `[-1/(n0-1), 1]`.
///
/// Unequal cluster sizes use the usual `n0 = (N - Σ n_j² / N) / (J - 1)`.
pub fn empirical_icc<F: Scalar>(assignment: &AssignmentMatrix<F>, arm: usize) -> Result<F> {
    let j = assignment.n_clusters();
    if arm >= assignment.arms() {
        return Err(Error::IndexOutOfRange(format!("arm {arm}")));
    }
    if j < 2 {
        return Err(Error::DegenerateGeometry("need at least 2 clusters".into()));
    }
    if (0..j).any(|c| assignment.cluster_size(c) < 1) {
        return Err(Error::DegenerateGeometry("empty cluster".into()));
    }
    let sizes: Vec<f64> = (0..j).map(|c| assignment.cluster_size(c) as f64).collect();
    let total: f64 = sizes.iter().sum();
    if total - j as f64 <= 0.0 {
        return Err(Error::DegenerateGeometry(
            "need clusters with at least 2 units".into(),
        ));
    }
    let hits: Vec<f64> = assignment.counts().iter().map(|c| c[arm] as f64).collect();
    let grand = hits.iter().sum::<f64>() / total;
    if grand == 0.0 || grand == 1.0 {
        return Err(Error::DegenerateVariance(arm));
    }
    // Binary indicator: within-cluster SS of cluster c is h - h²/n.
    let ssb: f64 = hits
        .iter()
        .zip(&sizes)
        .map(|(h, n)| n * (h / n - grand).powi(2))
        .sum();
    let ssw: f64 = hits.iter().zip(&sizes).map(|(h, n)| h - h * h / n).sum();
    let msb = ssb / (j as f64 - 1.0);
    let msw = ssw / (total - j as f64);
    let n0 = (total - sizes.iter().map(|n| n * n).sum::<f64>() / total) / (j as f64 - 1.0);
    let icc = (msb - msw) / (msb + (n0 - 1.0) * msw);
    let lower = if n0 > 1.0 { -1.0 / (n0 - 1.0) } else { -1.0 };
    Ok(F::lit(icc.clamp(lower, 1.0)))
}
