use std::io::{Read, Write};

use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Realized treatment labels for every (cluster, unit), with the cluster
/// probability vectors they were drawn from.
///
/// Cluster sizes may differ (deployment path); the simulator always
/// produces equal sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix<F> {
    arms: usize,
    cluster_ids: Vec<String>,
    labels: Vec<Vec<usize>>,
    cluster_probs: Vec<Vec<F>>,
    counts: Vec<Vec<usize>>,
}

impl<F: Scalar> AssignmentMatrix<F> {
    /// Builds the matrix and its per-cluster arm counts.
    pub fn new(
        arms: usize,
        cluster_ids: Vec<String>,
        labels: Vec<Vec<usize>>,
        cluster_probs: Vec<Vec<F>>,
    ) -> Result<Self> {
        if cluster_ids.len() != labels.len() || cluster_probs.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids, {} label rows, {} probability rows",
                cluster_ids.len(),
                labels.len(),
                cluster_probs.len()
            )));
        }
        let mut counts = Vec::with_capacity(labels.len());
        for (j, row) in labels.iter().enumerate() {
            if cluster_probs[j].len() != arms {
                return Err(Error::DimensionMismatch(format!(
                    "cluster {j} has {} probabilities, expected {arms}",
                    cluster_probs[j].len()
                )));
            }
            let mut c = vec![0usize; arms];
            for &a in row {
                if a >= arms {
                    return Err(Error::IndexOutOfRange(format!("label {a} in cluster {j}")));
                }
                c[a] += 1;
            }
            counts.push(c);
        }
        Ok(AssignmentMatrix {
            arms,
            cluster_ids,
            labels,
            cluster_probs,
            counts,
        })
    }

    /// Number of arms including control (`M + 1`).
    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn treatments(&self) -> usize {
        self.arms - 1
    }

    pub fn n_clusters(&self) -> usize {
        self.labels.len()
    }

    pub fn cluster_size(&self, j: usize) -> usize {
        self.labels[j].len()
    }

    pub fn total_units(&self) -> usize {
        self.labels.iter().map(Vec::len).sum()
    }

    pub fn cluster_ids(&self) -> &[String] {
        &self.cluster_ids
    }

    pub fn labels(&self) -> &[Vec<usize>] {
        &self.labels
    }

    pub fn cluster_probs(&self) -> &[Vec<F>] {
        &self.cluster_probs
    }

    /// Per-cluster arm counts; each row sums to the cluster size.
    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    /// Share of cluster `j` assigned to arm `m` (the unit itself included).
    pub fn proportion(&self, j: usize, m: usize) -> F {
        F::from_count(self.counts[j][m]) / F::from_count(self.labels[j].len())
    }

    pub fn proportions_row(&self, j: usize) -> Vec<F> {
        (0..self.arms).map(|m| self.proportion(j, m)).collect()
    }

    pub fn proportions(&self) -> Vec<Vec<F>> {
        (0..self.n_clusters())
            .map(|j| self.proportions_row(j))
            .collect()
    }

    /// Exact rational proportions with denominator `n_j`.
    pub fn exact_proportions(&self, j: usize) -> Vec<Ratio<u64>> {
        let n = self.labels[j].len() as u64;
        self.counts[j]
            .iter()
            .map(|&c| Ratio::new(c as u64, n))
            .collect()
    }

    /// Writes `cluster,unit,arm` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            cluster: &'a str,
            unit: usize,
            arm: usize,
        }
        let mut out = csv::Writer::from_writer(w);
        for (j, row) in self.labels.iter().enumerate() {
            for (i, &arm) in row.iter().enumerate() {
                out.serialize(Row {
                    cluster: &self.cluster_ids[j],
                    unit: i,
                    arm,
                })?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads `cluster,unit,arm` rows; clusters keep first-appearance
    /// order and units are ordered by their `unit` index. Probability
    /// vectors are not part of the format and are set to the empirical
    /// proportions.
    pub fn read_csv<R: Read>(arms: usize, r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["cluster", "unit", "arm"] {
            return Err(Error::Parse(format!("unexpected header {headers:?}")));
        }
        let mut ids: Vec<String> = Vec::new();
        let mut index = std::collections::HashMap::new();
        let mut rows: Vec<Vec<(usize, usize)>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let id = rec[0].to_string();
            let unit: usize = rec[1]
                .parse()
                .map_err(|e| Error::Parse(format!("unit: {e}")))?;
            let arm: usize = rec[2]
                .parse()
                .map_err(|e| Error::Parse(format!("arm: {e}")))?;
            let j = *index.entry(id.clone()).or_insert_with(|| {
                ids.push(id);
                rows.push(Vec::new());
                rows.len() - 1
            });
            rows[j].push((unit, arm));
        }
        let labels: Vec<Vec<usize>> = rows
            .into_iter()
            .map(|mut r| {
                r.sort_by_key(|&(u, _)| u);
                r.into_iter().map(|(_, a)| a).collect()
            })
            .collect();
        let probs = labels
            .iter()
            .map(|row| {
                let mut c = vec![F::zero(); arms];
                for &a in row {
                    if a < arms {
                        c[a] = c[a] + F::one();
                    }
                }
                let n = F::from_count(row.len());
                c.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Self::new(arms, ids, labels, probs)
    }
}

/// Default cluster identifiers `0..J`.
pub fn index_ids(clusters: usize) -> Vec<String> {
    (0..clusters).map(|j| j.to_string()).collect()
}
