//! Monte Carlo evaluation of designs over a parameter grid.
//!
//! Each iteration draws a two-stage assignment, simulates outcomes, fits
//! the LM and DM estimators and records both arm-versus-control
//! contrasts. Cell aggregates pool the contrasts and the iterations.
//!
//! Every iteration gets its own derived [`RngStream`] and results are
//! reduced sequentially in iteration order, so the output is bitwise
//! identical for any thread count.

mod report;

pub use report::{
    read_cells_csv, read_cells_json, write_cells_csv, write_cells_json, CellCsvWriter,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{CiConfig, Contrast, DesignSpec, DgpParams, Estimator};
use crate::dgp::{simulate_outcomes, true_haate};
use crate::error::{Error, Result};
use crate::estimate::{
    build_dm_matrix, build_lm_matrix, haate_contrast_dm, haate_contrast_lm, ols_fit_flat,
    SmallSample, DEFAULT_RANK_TOL,
};
use crate::randomize::{assign_two_stage, treatment_icc};
use crate::rng::{mix, RngStream};
use crate::scalar::Scalar;

/// Extra attempts for an iteration whose fit is unusable.
pub const RETRY_BUDGET: usize = 5;

/// Relative RMSE spread below which a stratum counts as flat.
pub const FLAT_RMSE_TOL: f64 = 0.10;

/// How the values on the concentration axis are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaAxis {
    /// Values are `(M+1)·ᾱ`.
    #[default]
    Scaled,
    /// Values are `ᾱ` itself.
    PerArm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub rho_u_values: Vec<f64>,
    pub c_values: Vec<f64>,
    pub scaled_alpha_values: Vec<f64>,
    pub iterations: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub alpha_axis: AlphaAxis,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            rho_u_values: vec![0.0, 0.1, 0.3, 0.5, 0.8],
            c_values: vec![0.0, 0.1, 0.5, 1.0],
            scaled_alpha_values: vec![
                0.001, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 2.0, 3.0,
                10.0, 1000.0,
            ],
            iterations: 1000,
            base_seed: 20_190_601,
            alpha_axis: AlphaAxis::Scaled,
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("rho_u_values", &self.rho_u_values),
            ("c_values", &self.c_values),
            ("scaled_alpha_values", &self.scaled_alpha_values),
        ];
        for (name, axis) in axes {
            if axis.is_empty() {
                return Err(Error::EmptyInput(format!("grid axis {name} is empty")));
            }
            if axis.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput);
            }
        }
        if let Some(r) = self.rho_u_values.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::OutOfRange(format!("rho_u {r} not in [0, 1)")));
        }
        if let Some(c) = self.c_values.iter().find(|c| **c < 0.0) {
            return Err(Error::OutOfRange(format!("c {c} is negative")));
        }
        if let Some(&a) = self.scaled_alpha_values.iter().find(|a| **a <= 0.0) {
            return Err(Error::NonPositiveAlpha(a));
        }
        if self.iterations == 0 {
            return Err(Error::EmptyInput("iterations must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rho_u_values.len() * self.c_values.len() * self.scaled_alpha_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `ᾱ` for an axis value.
    pub fn alpha_bar(&self, value: f64, treatments: usize) -> f64 {
        match self.alpha_axis {
            AlphaAxis::Scaled => value / (treatments + 1) as f64,
            AlphaAxis::PerArm => value,
        }
    }

    /// Cells `(rho_u, c, axis value)` in lexicographic order.
    pub fn cells(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::with_capacity(self.len());
        for &r in &self.rho_u_values {
            for &c in &self.c_values {
                for &a in &self.scaled_alpha_values {
                    out.push((r, c, a));
                }
            }
        }
        out
    }
}

/// Seed of the cell at the given coordinates.
pub fn cell_seed(base_seed: u64, rho_u: f64, c: f64, alpha_bar: f64) -> u64 {
    mix(
        mix(mix(base_seed, rho_u.to_bits()), c.to_bits()),
        alpha_bar.to_bits(),
    )
}

/// Fitting and interval options shared by every iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    #[serde(default)]
    pub ci: CiConfig,
    #[serde(default)]
    pub correction: SmallSample,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
}

fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}

impl Default for Inference {
    fn default() -> Self {
        Inference {
            ci: CiConfig::default(),
            correction: SmallSample::CR1,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

/// NaN travels through JSON as `null`.
mod nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&(!x.is_nan()).then_some(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let v = Vec::<Option<f64>>::deserialize(d)?;
            Ok(v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    /// Mean signed error over contrasts and iterations.
    #[serde(with = "nullable")]
    pub bias: f64,
    /// Root mean squared error over contrasts and iterations.
    #[serde(with = "nullable")]
    pub rmse: f64,
    #[serde(with = "nullable")]
    pub mean_se: f64,
    #[serde(with = "nullable")]
    pub coverage: f64,
    /// Monte Carlo standard error of `bias`, from per-iteration averages.
    #[serde(with = "nullable")]
    pub bias_mc_se: f64,
    /// Per-arm bias, arms `1..=M`.
    #[serde(with = "nullable::vec", default)]
    pub arm_bias: Vec<f64>,
    /// Per-arm coverage, arms `1..=M`.
    #[serde(with = "nullable::vec", default)]
    pub arm_coverage: Vec<f64>,
    /// Fraction of contrasts where the own-arm slope was dropped.
    #[serde(with = "nullable", default = "nan")]
    pub degraded: f64,
}

fn nan() -> f64 {
    f64::NAN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub rho_u: f64,
    pub c: f64,
    pub scaled_alpha: f64,
    pub alpha_bar: f64,
    pub rho_m: f64,
    /// True effects of arms `1..=M`.
    pub truths: Vec<f64>,
    pub lm: EstimatorSummary,
    pub dm: EstimatorSummary,
    pub iterations_completed: usize,
    pub iterations_failed: usize,
}

impl CellSummary {
    pub fn summary(&self, estimator: Estimator) -> &EstimatorSummary {
        match estimator {
            Estimator::LinearInMeans => &self.lm,
            Estimator::DifferenceInMeans => &self.dm,
        }
    }
}

/// Contrasts from one iteration, arms `1..=M`.
#[derive(Debug, Clone)]
struct Draw {
    lm: Vec<Contrast<f64>>,
    dm: Vec<Contrast<f64>>,
}

fn retryable(e: &Error) -> bool {
    matches!(e, Error::AllColumnsDropped | Error::MissingBetaColumn(_))
}

fn one_iteration(
    spec: &DesignSpec<f64>,
    params: &DgpParams<f64>,
    stream: RngStream,
    inf: &Inference,
) -> Result<Draw> {
    let assignment = assign_two_stage(spec, stream.derive(1))?;
    let y = simulate_outcomes(&assignment, params, stream.derive(2))?.flatten();
    let z = inf.ci.critical_value(spec.clusters);
    let lm_fit = ols_fit_flat(
        &build_lm_matrix(&assignment),
        &y,
        inf.rank_tol,
        inf.correction,
    )?;
    let dm_fit = ols_fit_flat(
        &build_dm_matrix(&assignment),
        &y,
        inf.rank_tol,
        inf.correction,
    )?;
    let mut draw = Draw {
        lm: Vec::new(),
        dm: Vec::new(),
    };
    for m in 1..spec.arms() {
        draw.lm.push(haate_contrast_lm(&lm_fit, m, z)?);
        draw.dm.push(haate_contrast_dm(&dm_fit, m, z)?);
    }
    Ok(draw)
}

fn iteration_with_retries(
    spec: &DesignSpec<f64>,
    params: &DgpParams<f64>,
    stream: RngStream,
    inf: &Inference,
) -> Result<Option<Draw>> {
    for attempt in 0..=RETRY_BUDGET {
        match one_iteration(spec, params, stream.derive(attempt as u64), inf) {
            Ok(d) => return Ok(Some(d)),
            Err(e) if retryable(&e) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

fn summarize(draws: &[&[Contrast<f64>]], truths: &[f64]) -> EstimatorSummary {
    let r = draws.len();
    let arms = truths.len();
    let total = (r * arms) as f64;
    let (mut sum_err, mut sum_sq, mut sum_se, mut covered, mut degraded) =
        (0.0, 0.0, 0.0, 0usize, 0usize);
    let mut arm_err = vec![0.0; arms];
    let mut arm_cov = vec![0usize; arms];
    let mut per_iter = Vec::with_capacity(r);
    for contrasts in draws {
        let mut it = 0.0;
        for (k, (con, &truth)) in contrasts.iter().zip(truths).enumerate() {
            let err = con.estimate - truth;
            sum_err += err;
            sum_sq += err * err;
            sum_se += con.se;
            arm_err[k] += err;
            it += err;
            if con.covers(truth) {
                covered += 1;
                arm_cov[k] += 1;
            }
            if con.degraded {
                degraded += 1;
            }
        }
        per_iter.push(it / arms as f64);
    }
    if r == 0 {
        let nan = f64::NAN;
        return EstimatorSummary {
            bias: nan,
            rmse: nan,
            mean_se: nan,
            coverage: nan,
            bias_mc_se: nan,
            arm_bias: vec![nan; arms],
            arm_coverage: vec![nan; arms],
            degraded: nan,
        };
    }
    let bias = sum_err / total;
    let bias_mc_se = if r > 1 {
        let m = per_iter.iter().sum::<f64>() / r as f64;
        let v = per_iter.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (r - 1) as f64;
        (v / r as f64).sqrt()
    } else {
        0.0
    };
    EstimatorSummary {
        bias,
        rmse: (sum_sq / total).sqrt(),
        mean_se: sum_se / total,
        coverage: covered as f64 / total,
        bias_mc_se,
        arm_bias: arm_err.iter().map(|e| e / r as f64).collect(),
        arm_coverage: arm_cov.iter().map(|&c| c as f64 / r as f64).collect(),
        degraded: degraded as f64 / total,
    }
}

/// Runs `iterations` replications of one design/model cell with default
/// inference options.
pub fn run_cell(
    spec: &DesignSpec<f64>,
    params: &DgpParams<f64>,
    iterations: usize,
    base_seed: u64,
) -> Result<CellSummary> {
    run_cell_with(spec, params, iterations, base_seed, &Inference::default())
}

pub fn run_cell_with(
    spec: &DesignSpec<f64>,
    params: &DgpParams<f64>,
    iterations: usize,
    base_seed: u64,
    inf: &Inference,
) -> Result<CellSummary> {
    spec.validate()?;
    params.validate()?;
    if spec.arms() != params.arms() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} arms, model has {}",
            spec.arms(),
            params.arms()
        )));
    }
    if iterations == 0 {
        return Err(Error::EmptyInput("iterations must be positive".into()));
    }
    let alpha_bar = spec.alpha_bar().ok_or(Error::UnbalancedAlphaUnsupported)?;
    let truths = (1..spec.arms())
        .map(|m| true_haate(params, m))
        .collect::<Result<Vec<_>>>()?;
    let root = RngStream::new(base_seed, 0);
    let results: Vec<Result<Option<Draw>>> = (0..iterations)
        .into_par_iter()
        .map(|i| iteration_with_retries(spec, params, root.derive(i as u64), inf))
        .collect();
    let mut draws = Vec::with_capacity(iterations);
    let mut failed = 0;
    for r in results {
        match r? {
            Some(d) => draws.push(d),
            None => failed += 1,
        }
    }
    let lm: Vec<&[Contrast<f64>]> = draws.iter().map(|d| d.lm.as_slice()).collect();
    let dm: Vec<&[Contrast<f64>]> = draws.iter().map(|d| d.dm.as_slice()).collect();
    Ok(CellSummary {
        rho_u: params.rho_u,
        c: params.c,
        scaled_alpha: alpha_bar * spec.arms() as f64,
        alpha_bar,
        rho_m: treatment_icc(alpha_bar, spec.treatments)?,
        truths: truths.clone(),
        lm: summarize(&lm, &truths),
        dm: summarize(&dm, &truths),
        iterations_completed: draws.len(),
        iterations_failed: failed,
    })
}

/// Error raised by one grid cell; the sweep carries on without it.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub rho_u: f64,
    pub c: f64,
    pub axis_value: f64,
    pub error: Error,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepOutput {
    pub cells: Vec<CellSummary>,
    pub failures: Vec<CellFailure>,
}

impl SweepOutput {
    /// True when some cell errored or lost iterations.
    pub fn has_failures(&self) -> bool {
        !self.failures.is_empty() || self.cells.iter().any(|c| c.iterations_failed > 0)
    }
}

/// Runs every grid cell. `template` supplies `J`, `n`, `M`;
/// `params` supplies everything but `c` and `ρ_u`.
pub fn sweep(
    grid: &SweepGrid,
    template: &DesignSpec<f64>,
    params: &DgpParams<f64>,
) -> Result<SweepOutput> {
    sweep_with(grid, template, params, &Inference::default())
}

pub fn sweep_with(
    grid: &SweepGrid,
    template: &DesignSpec<f64>,
    params: &DgpParams<f64>,
    inf: &Inference,
) -> Result<SweepOutput> {
    let mut out = SweepOutput::default();
    sweep_each(grid, template, params, inf, |r| match r {
        Ok(cell) => out.cells.push(cell.clone()),
        Err(f) => out.failures.push(f.clone()),
    })?;
    Ok(out)
}

/// Like [`sweep_with`], handing each cell to `on_cell` as soon as it is done.
pub fn sweep_each<G>(
    grid: &SweepGrid,
    template: &DesignSpec<f64>,
    params: &DgpParams<f64>,
    inf: &Inference,
    mut on_cell: G,
) -> Result<()>
where
    G: FnMut(std::result::Result<&CellSummary, &CellFailure>),
{
    grid.validate()?;
    for (rho_u, c, value) in grid.cells() {
        let alpha_bar = grid.alpha_bar(value, template.treatments);
        let spec = DesignSpec::balanced(
            template.clusters,
            template.cluster_size,
            template.treatments,
            alpha_bar,
        );
        let p = DgpParams {
            c,
            rho_u,
            ..params.clone()
        };
        let seed = cell_seed(grid.base_seed, rho_u, c, alpha_bar);
        match run_cell_with(&spec, &p, grid.iterations, seed, inf) {
            Ok(cell) => on_cell(Ok(&cell)),
            Err(error) => on_cell(Err(&CellFailure {
                rho_u,
                c,
                axis_value: value,
                error,
            })),
        }
    }
    Ok(())
}

/// Where a selected design sits on the concentration axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    /// Smallest `ρ_m` in the stratum.
    UnitPole,
    /// Largest `ρ_m` in the stratum.
    ClusterPole,
    Interior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub rho_u: f64,
    pub c: f64,
    pub scaled_alpha: f64,
    pub alpha_bar: f64,
    pub rho_m: f64,
    pub rmse: f64,
    /// RMSE varies by less than [`FLAT_RMSE_TOL`] across the stratum.
    pub flat: bool,
    pub position: Position,
    /// Index of the chosen cell in the input.
    pub cell: usize,
}

/// Minimum-RMSE design within each `(ρ_u, c)` stratum, strata in order of
/// first appearance. Ties go to the larger `ρ_m`.
pub fn select_min_rmse(cells: &[CellSummary], estimator: Estimator) -> Result<Vec<Selection>> {
    if cells.is_empty() {
        return Err(Error::EmptyInput("no cells to select from".into()));
    }
    let mut strata: Vec<(f64, f64, Vec<usize>)> = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        match strata
            .iter_mut()
            .find(|(r, c, _)| *r == cell.rho_u && *c == cell.c)
        {
            Some(s) => s.2.push(i),
            None => strata.push((cell.rho_u, cell.c, vec![i])),
        }
    }
    let mut out = Vec::with_capacity(strata.len());
    for (rho_u, c, members) in strata {
        let rmse = |i: usize| cells[i].summary(estimator).rmse;
        let valid: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| rmse(i).is_finite())
            .collect();
        if valid.is_empty() {
            continue;
        }
        let mut best = valid[0];
        for &i in &valid[1..] {
            let (a, b) = (rmse(i), rmse(best));
            let tie = (a - b).abs() <= 1e-12 * b.abs();
            if (a < b && !tie) || (tie && cells[i].rho_m > cells[best].rho_m) {
                best = i;
            }
        }
        let lo = valid.iter().map(|&i| rmse(i)).fold(f64::INFINITY, f64::min);
        let hi = valid
            .iter()
            .map(|&i| rmse(i))
            .fold(f64::NEG_INFINITY, f64::max);
        let rho_lo = valid
            .iter()
            .map(|&i| cells[i].rho_m)
            .fold(f64::INFINITY, f64::min);
        let rho_hi = valid
            .iter()
            .map(|&i| cells[i].rho_m)
            .fold(f64::NEG_INFINITY, f64::max);
        let chosen = &cells[best];
        // a lone cell counts as the cluster pole
        let position = if chosen.rho_m == rho_hi {
            Position::ClusterPole
        } else if chosen.rho_m == rho_lo {
            Position::UnitPole
        } else {
            Position::Interior
        };
        out.push(Selection {
            rho_u,
            c,
            scaled_alpha: chosen.scaled_alpha,
            alpha_bar: chosen.alpha_bar,
            rho_m: chosen.rho_m,
            rmse: chosen.summary(estimator).rmse,
            flat: hi - lo <= FLAT_RMSE_TOL * lo,
            position,
            cell: best,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("no cell has a finite RMSE".into()));
    }
    Ok(out)
}

/// `E[p_l | A = m]` under balanced Dirichlet-multinomial assignment.
pub fn expected_share<F: Scalar>(
    alpha_bar: F,
    treatments: usize,
    n: usize,
    m: usize,
    l: usize,
) -> F {
    let one = F::one();
    let own = if l == m { one } else { F::zero() };
    let nn = F::from_count(n);
    let denom = F::from_count(treatments + 1) * alpha_bar + one;
    (own + (nn - one) * (alpha_bar + own) / denom) / nn
}

/// Large-`J` expected DM error for arm `m` versus control.
pub fn analytic_dm_bias<F: Scalar>(
    spec: &DesignSpec<F>,
    params: &DgpParams<F>,
    m: usize,
) -> Result<F> {
    spec.validate()?;
    params.validate()?;
    let alpha_bar = spec.alpha_bar().ok_or(Error::UnbalancedAlphaUnsupported)?;
    if spec.arms() != params.arms() {
        return Err(Error::DimensionMismatch(
            "design and model arm counts differ".into(),
        ));
    }
    let mean = |a: usize| {
        let mut s = params.beta[a];
        for l in 1..spec.arms() {
            let share = expected_share(alpha_bar, spec.treatments, spec.cluster_size, a, l);
            s = s + params.delta_base[a][l - 1] * params.c * share;
        }
        s
    };
    Ok(mean(m) - mean(0) - true_haate(params, m)?)
}

/// [`analytic_dm_bias`] averaged over arms `1..=M`.
pub fn analytic_dm_bias_mean<F: Scalar>(spec: &DesignSpec<F>, params: &DgpParams<F>) -> Result<F> {
    let mut s = F::zero();
    for m in 1..spec.arms() {
        s = s + analytic_dm_bias(spec, params, m)?;
    }
    Ok(s / F::from_count(spec.treatments))
}
