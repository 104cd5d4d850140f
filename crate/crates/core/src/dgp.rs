//! Linear-in-means outcome model with cluster random effects.
//!
//! `Y_ji = β_a + Σ_{l=1..M} δ_{a,l}·c·p_{j,l} + u_j + e_ji` for a unit on
//! arm `a`, where `p_{j,l}` is the share of cluster `j` on arm `l`
//! (including the unit itself), `u_j ~ N(0, τ²)` and `e_ji ~ N(0, σ²)`.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::design::DgpParams;
use crate::error::{Error, Result};
use crate::randomize::AssignmentMatrix;
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Realized outcomes, shaped like the generating assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeMatrix<F> {
    pub y: Vec<Vec<F>>,
}

impl<F: Scalar> OutcomeMatrix<F> {
    pub fn new(y: Vec<Vec<F>>) -> Self {
        OutcomeMatrix { y }
    }

    pub fn total_units(&self) -> usize {
        self.y.iter().map(Vec::len).sum()
    }

    /// Cluster-major flattening, matching design-matrix row order.
    pub fn flatten(&self) -> Vec<F> {
        self.y.iter().flatten().copied().collect()
    }

    /// Writes `cluster,unit,arm,y` rows.
    pub fn write_csv<W: Write>(&self, assignment: &AssignmentMatrix<F>, w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            cluster: &'a str,
            unit: usize,
            arm: usize,
            y: f64,
        }
        check_shape(assignment, self)?;
        let mut out = csv::Writer::from_writer(w);
        for (j, row) in self.y.iter().enumerate() {
            for (i, &y) in row.iter().enumerate() {
                out.serialize(Row {
                    cluster: &assignment.cluster_ids()[j],
                    unit: i,
                    arm: assignment.labels()[j][i],
                    y: y.as_f64(),
                })?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn check_shape<F: Scalar>(a: &AssignmentMatrix<F>, y: &OutcomeMatrix<F>) -> Result<()> {
    let ok = a.n_clusters() == y.y.len()
        && y.y
            .iter()
            .enumerate()
            .all(|(j, r)| r.len() == a.cluster_size(j));
    if ok {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(
            "outcomes do not match assignment shape".into(),
        ))
    }
}

/// Cluster and unit error draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorComponents<F> {
    pub u: Vec<F>,
    pub e: Vec<Vec<F>>,
}

/// Realized slope of arm-`m` outcomes on the share of arm `l` (`l ≥ 1`).
pub fn effective_slope<F: Scalar>(params: &DgpParams<F>, m: usize, l: usize) -> Result<F> {
    let row = params
        .delta_base
        .get(m)
        .ok_or_else(|| Error::IndexOutOfRange(format!("arm {m}")))?;
    if l == 0 || l > row.len() {
        return Err(Error::IndexOutOfRange(format!(
            "slope arm {l} (must be 1..={})",
            row.len()
        )));
    }
    Ok(row[l - 1] * params.c)
}

/// Mean outcome of a unit on arm `a` in a cluster with arm shares `p`
/// (`p[0]` is the control share and carries no slope).
pub fn expected_outcome<F: Scalar>(params: &DgpParams<F>, a: usize, p: &[F]) -> Result<F> {
    let beta = *params
        .beta
        .get(a)
        .ok_or_else(|| Error::IndexOutOfRange(format!("arm {a}")))?;
    if p.len() != params.arms() {
        return Err(Error::DimensionMismatch(format!(
            "proportion vector has {} entries, expected {}",
            p.len(),
            params.arms()
        )));
    }
    let mut y = beta;
    for l in 1..params.arms() {
        y = y + effective_slope(params, a, l)? * p[l];
    }
    Ok(y)
}

/// Cluster-effect variance `τ² = σ²ρ_u/(1-ρ_u)`.
pub fn tau_squared<F: Scalar>(params: &DgpParams<F>) -> Result<F> {
    let r = params.rho_u;
    if !(r >= F::zero() && r < F::one()) {
        return Err(Error::OutOfRange(format!(
            "rho_u must lie in [0,1), got {r}"
        )));
    }
    Ok(params.sigma2 * r / (F::one() - r))
}

/// HAATE of arm `m` versus control: `β_m + δ_{m,m}·c − β_0`.
pub fn true_haate<F: Scalar>(params: &DgpParams<F>, m: usize) -> Result<F> {
    if m == 0 || m >= params.arms() {
        return Err(Error::IndexOutOfRange(format!("treatment arm {m}")));
    }
    Ok(params.beta[m] + effective_slope(params, m, m)? - params.beta[0])
}

fn normal<F: Scalar, R: Rng + ?Sized>(rng: &mut R, sd: f64) -> F {
    let z: f64 = StandardNormal.sample(rng);
    F::lit(z * sd)
}

/// Draws `u_j ~ N(0, τ²)` then `e_ji ~ N(0, σ²)`, cluster by cluster.
pub fn draw_errors<F: Scalar, R: Rng + ?Sized>(
    assignment: &AssignmentMatrix<F>,
    params: &DgpParams<F>,
    rng: &mut R,
) -> Result<ErrorComponents<F>> {
    let tau = tau_squared(params)?.as_f64().sqrt();
    let sigma = params.sigma2.as_f64().sqrt();
    let mut u = Vec::with_capacity(assignment.n_clusters());
    let mut e = Vec::with_capacity(assignment.n_clusters());
    for j in 0..assignment.n_clusters() {
        u.push(normal(rng, tau));
        e.push(
            (0..assignment.cluster_size(j))
                .map(|_| normal(rng, sigma))
                .collect(),
        );
    }
    Ok(ErrorComponents { u, e })
}

/// Simulated outcomes for a fixed assignment.
pub fn simulate_outcomes<F: Scalar>(
    assignment: &AssignmentMatrix<F>,
    params: &DgpParams<F>,
    stream: RngStream,
) -> Result<OutcomeMatrix<F>> {
    params.validate()?;
    if assignment.arms() != params.arms() {
        return Err(Error::DimensionMismatch(format!(
            "assignment has {} arms, model has {}",
            assignment.arms(),
            params.arms()
        )));
    }
    let mut rng = stream.rng();
    let errors = draw_errors(assignment, params, &mut rng)?;
    let mut y = Vec::with_capacity(assignment.n_clusters());
    for j in 0..assignment.n_clusters() {
        let p = assignment.proportions_row(j);
        let means = (0..params.arms())
            .map(|a| expected_outcome(params, a, &p))
            .collect::<Result<Vec<F>>>()?;
        let row = assignment.labels()[j]
            .iter()
            .zip(&errors.e[j])
            .map(|(&a, &e)| means[a] + errors.u[j] + e)
            .collect();
        y.push(row);
    }
    Ok(OutcomeMatrix { y })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::DesignSpec;
    use crate::randomize::{assign_two_stage, index_ids};

    fn params(c: f64, rho_u: f64) -> DgpParams<f64> {
        DgpParams::reference_three_arm(c, rho_u)
    }

    #[test]
    fn slopes_scale_with_c_once() {
        assert_eq!(effective_slope(&params(1.0, 0.0), 2, 1).unwrap(), 2.5);
        for m in 0..3 {
            for l in 1..3 {
                assert_eq!(effective_slope(&params(0.0, 0.0), m, l).unwrap(), 0.0);
            }
        }
        assert_eq!(effective_slope(&params(0.5, 0.0), 1, 2).unwrap(), -0.5);
        assert!(matches!(
            effective_slope(&params(1.0, 0.0), 1, 0),
            Err(Error::IndexOutOfRange(_))
        ));
        assert!(matches!(
            effective_slope(&params(1.0, 0.0), 3, 1),
            Err(Error::IndexOutOfRange(_))
        ));
    }

    #[test]
    fn homogeneous_means() {
        let pure = |a: usize| {
            let mut p = vec![0.0; 3];
            p[a] = 1.0;
            p
        };
        for &c in &[0.0, 0.3, 1.0] {
            assert_eq!(expected_outcome(&params(c, 0.0), 0, &pure(0)).unwrap(), 5.0);
        }
        assert_eq!(
            expected_outcome(&params(1.0, 0.0), 1, &pure(1)).unwrap(),
            8.5
        );
        assert_eq!(
            expected_outcome(&params(0.5, 0.0), 2, &pure(2)).unwrap(),
            1.25
        );
    }

    #[test]
    fn no_interference_ignores_shares() {
        let p = params(0.0, 0.0);
        for a in 0..3 {
            let x = expected_outcome(&p, a, &[0.2, 0.5, 0.3]).unwrap();
            let y = expected_outcome(&p, a, &[1.0, 0.0, 0.0]).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn tau_squared_values() {
        assert_eq!(tau_squared(&params(0.0, 0.0)).unwrap(), 0.0);
        assert!((tau_squared(&params(0.0, 0.5)).unwrap() - 1.0).abs() < 1e-15);
        assert!((tau_squared(&params(0.0, 0.8)).unwrap() - 4.0).abs() < 1e-12);
        let mut p = params(0.0, 0.3);
        let t = tau_squared(&p).unwrap();
        assert!((t / (t + p.sigma2) - 0.3).abs() < 1e-15);
        p.rho_u = 1.0;
        assert!(matches!(tau_squared(&p), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn haate_values() {
        assert!((true_haate(&params(0.1, 0.0), 1).unwrap() - 2.6).abs() < 1e-12);
        assert!((true_haate(&params(0.5, 0.0), 2).unwrap() + 3.75).abs() < 1e-12);
        assert_eq!(true_haate(&params(0.0, 0.0), 1).unwrap(), 2.5);
        assert!(matches!(
            true_haate(&params(0.0, 0.0), 0),
            Err(Error::IndexOutOfRange(_))
        ));
    }

    #[test]
    fn noiseless_limit_hits_means() {
        let spec = DesignSpec::balanced(30, 10, 2, 0.5_f64);
        let a = assign_two_stage(&spec, RngStream::new(1, 0)).unwrap();
        let mut p = params(1.0, 0.0);
        p.sigma2 = 1e-18;
        let y = simulate_outcomes(&a, &p, RngStream::new(1, 1)).unwrap();
        for j in 0..30 {
            let shares = a.proportions_row(j);
            for (i, &arm) in a.labels()[j].iter().enumerate() {
                let mu = expected_outcome(&p, arm, &shares).unwrap();
                assert!((y.y[j][i] - mu).abs() < 1e-6);
            }
        }
    }

    fn all_control(clusters: usize, n: usize) -> AssignmentMatrix<f64> {
        AssignmentMatrix::new(
            3,
            index_ids(clusters),
            vec![vec![0; n]; clusters],
            vec![vec![1.0, 0.0, 0.0]; clusters],
        )
        .unwrap()
    }

    #[test]
    fn cluster_mean_variance_matches_random_effects() {
        let (clusters, n) = (10_000, 20);
        let a = all_control(clusters, n);
        let p = params(0.7, 0.8);
        let y = simulate_outcomes(&a, &p, RngStream::new(3, 0)).unwrap();
        let means: Vec<f64> =
            y.y.iter()
                .map(|r| r.iter().sum::<f64>() / n as f64)
                .collect();
        let grand = means.iter().sum::<f64>() / clusters as f64;
        let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (clusters - 1) as f64;
        let target = 4.0 + 1.0 / n as f64;
        // sd of a normal sample variance: target·√(2/(J-1))
        let sd = target * (2.0 / (clusters - 1) as f64).sqrt();
        assert!((var - target).abs() < 4.0 * sd, "{var} vs {target}");
        // grand mean of homogeneous-control clusters is β_0
        let se = (target / clusters as f64).sqrt();
        assert!((grand - 5.0).abs() < 3.0 * se, "{grand}");
    }

    #[test]
    fn covariance_structure() {
        // fixed assignment, R replications: Var(Y) → σ²+τ², within-cluster
        // Cov → τ², cross-cluster Cov → 0
        let a = all_control(2, 2);
        let p = params(0.0, 0.5);
        let reps = 10_000;
        let base = RngStream::new(21, 0);
        let draws: Vec<[f64; 3]> = (0..reps)
            .map(|r| {
                let y = simulate_outcomes(&a, &p, base.derive(r)).unwrap();
                [y.y[0][0], y.y[0][1], y.y[1][0]]
            })
            .collect();
        let mean = |k: usize| draws.iter().map(|d| d[k]).sum::<f64>() / reps as f64;
        let m = [mean(0), mean(1), mean(2)];
        let cov = |a: usize, b: usize| {
            draws
                .iter()
                .map(|d| (d[a] - m[a]) * (d[b] - m[b]))
                .sum::<f64>()
                / (reps - 1) as f64
        };
        // Var(XY) for jointly normal: σ_x²σ_y² + σ_xy²
        let r = reps as f64;
        let check = |est: f64, target: f64, vx: f64, vy: f64| {
            let se = ((vx * vy + target * target) / r).sqrt();
            assert!((est - target).abs() < 4.0 * se, "{est} vs {target}");
        };
        check(cov(0, 0), 2.0, 2.0, 2.0);
        check(cov(0, 1), 1.0, 2.0, 2.0);
        check(cov(0, 2), 0.0, 2.0, 2.0);
    }

    #[test]
    fn replicate_average_converges_to_mean() {
        let spec = DesignSpec::balanced(4, 6, 2, 0.8_f64);
        let a = assign_two_stage(&spec, RngStream::new(5, 0)).unwrap();
        let p = params(1.0, 0.3);
        let reps = 4000;
        let mut acc = vec![vec![0.0; 6]; 4];
        for r in 0..reps {
            let y = simulate_outcomes(&a, &p, RngStream::new(6, r)).unwrap();
            for j in 0..4 {
                for i in 0..6 {
                    acc[j][i] += y.y[j][i] / reps as f64;
                }
            }
        }
        let sd = ((1.0 + tau_squared(&p).unwrap()) / reps as f64).sqrt();
        for j in 0..4 {
            let shares = a.proportions_row(j);
            for i in 0..6 {
                let mu = expected_outcome(&p, a.labels()[j][i], &shares).unwrap();
                assert!((acc[j][i] - mu).abs() < 4.5 * sd);
            }
        }
    }

    #[test]
    fn outcome_csv_columns() {
        let a = all_control(2, 2);
        let y = simulate_outcomes(&a, &params(0.0, 0.0), RngStream::new(1, 1)).unwrap();
        let mut buf = Vec::new();
        y.write_csv(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("cluster,unit,arm,y\n0,0,0,"));
        assert_eq!(text.lines().count(), 5);
    }
}
