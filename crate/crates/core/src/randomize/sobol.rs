//! Quasi-random Dirichlet draws for deployment.
//!
//! A small table of probability vectors is precomputed from the first
//! `K` non-zero points of an unscrambled Sobol sequence (Joe–Kuo
//! direction numbers, gray-code order), each coordinate mapped through
//! the Gamma(α_m, 1) quantile and normalized to the simplex. Clusters are
//! hashed onto table rows, then units are assigned i.i.d. from their row.

use std::io::{Read, Write};

use crate::design::{validate_design, DesignSpec};
use crate::error::{Error, Result};
use crate::randomize::{categorical, cumulative, gamma, normalize_log_weights, AssignmentMatrix};
use crate::rng::{keyed_hash, RngStream};
use crate::scalar::Scalar;

const BITS: usize = 32;
const QUANTILE_TOL: f64 = 1e-12;

/// (degree, interior polynomial coefficients, initial direction numbers)
/// for dimensions 2..=40; dimension 1 is the van der Corput sequence.
const JOE_KUO: [(u32, u32, &[u32]); 39] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
    (7, 4, &[1, 3, 7, 13, 13, 15, 69]),
    (7, 7, &[1, 1, 3, 13, 7, 35, 63]),
    (7, 8, &[1, 3, 5, 9, 1, 25, 53]),
    (7, 14, &[1, 3, 1, 13, 9, 35, 107]),
    (7, 19, &[1, 3, 1, 5, 27, 61, 31]),
    (7, 21, &[1, 1, 5, 11, 19, 41, 61]),
    (7, 28, &[1, 3, 5, 3, 3, 13, 69]),
    (7, 31, &[1, 1, 7, 13, 1, 19, 1]),
    (7, 32, &[1, 3, 7, 5, 13, 19, 59]),
    (7, 37, &[1, 1, 3, 9, 25, 29, 41]),
    (7, 41, &[1, 3, 5, 13, 23, 1, 55]),
    (7, 42, &[1, 3, 7, 3, 13, 59, 17]),
    (7, 50, &[1, 3, 1, 3, 5, 53, 69]),
    (7, 55, &[1, 1, 5, 5, 23, 33, 13]),
    (7, 56, &[1, 1, 7, 7, 1, 61, 123]),
    (7, 59, &[1, 1, 7, 9, 13, 61, 49]),
    (7, 62, &[1, 3, 3, 5, 3, 55, 33]),
    (8, 14, &[1, 3, 1, 15, 31, 13, 49, 245]),
    (8, 21, &[1, 3, 5, 15, 31, 59, 63, 97]),
    (8, 22, &[1, 3, 1, 11, 11, 11, 77, 249]),
];

/// Highest supported dimension (number of arms).
pub const MAX_SOBOL_DIMENSION: usize = JOE_KUO.len() + 1;

fn direction_numbers(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (k, x) in v.iter_mut().enumerate() {
            *x = 1 << (BITS - 1 - k);
        }
        return v;
    }
    let (s, a, m) = JOE_KUO[dim - 1];
    let s = s as usize;
    for k in 0..s.min(BITS) {
        v[k] = m[k] << (BITS - 1 - k);
    }
    for k in s..BITS {
        let mut x = v[k - s] ^ (v[k - s] >> s);
        for i in 1..s {
            if (a >> (s - 1 - i)) & 1 == 1 {
                x ^= v[k - i];
            }
        }
        v[k] = x;
    }
    v
}

/// Unscrambled Sobol points in gray-code order, starting at the origin.
#[derive(Debug, Clone)]
pub struct SobolSequence {
    directions: Vec<[u32; BITS]>,
    state: Vec<u32>,
    index: u64,
}

impl SobolSequence {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_SOBOL_DIMENSION {
            return Err(Error::DimensionUnsupported {
                requested: dim,
                max: MAX_SOBOL_DIMENSION,
            });
        }
        Ok(SobolSequence {
            directions: (0..dim).map(direction_numbers).collect(),
            state: vec![0; dim],
            index: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.state.len()
    }

    /// Next point as 32-bit integers (coordinate = value / 2^32).
    pub fn next_raw(&mut self) -> Vec<u32> {
        let out = self.state.clone();
        let bit = (!self.index).trailing_zeros() as usize;
        assert!(bit < BITS, "Sobol sequence exhausted");
        for (s, v) in self.state.iter_mut().zip(&self.directions) {
            *s ^= v[bit];
        }
        self.index += 1;
        out
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        self.next_raw()
            .into_iter()
            .map(|x| x as f64 / 4_294_967_296.0)
            .collect()
    }
}

/// Maps a point of `(0,1)^{M+1}` to the simplex through Gamma(α_m, 1)
/// quantiles followed by normalization.
pub fn map_to_simplex<F: Scalar>(point: &[f64], alpha: &[F]) -> Result<Vec<F>> {
    if point.len() != alpha.len() {
        return Err(Error::DimensionMismatch(format!(
            "point has {} coordinates for {} arms",
            point.len(),
            alpha.len()
        )));
    }
    let mut logs = Vec::with_capacity(point.len());
    for (&u, a) in point.iter().zip(alpha) {
        let a = a.as_f64();
        if !(a > 0.0) {
            return Err(Error::NonPositiveAlpha(a));
        }
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::OutOfRange(format!("quasi-random coordinate {u}")));
        }
        logs.push(gamma::ln_gamma_quantile(a, u, QUANTILE_TOL));
    }
    Ok(normalize_log_weights(&logs)
        .into_iter()
        .map(F::lit)
        .collect())
}

/// `K` precomputed probability vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SobolDrawTable<F> {
    vectors: Vec<Vec<F>>,
}

impl<F: Scalar> SobolDrawTable<F> {
    pub fn from_rows(vectors: Vec<Vec<F>>) -> Result<Self> {
        let arms = vectors.first().map(Vec::len).ok_or(Error::EmptyTable)?;
        for (r, row) in vectors.iter().enumerate() {
            if row.len() != arms {
                return Err(Error::DimensionMismatch(format!(
                    "row {r} has {} entries",
                    row.len()
                )));
            }
            let s: f64 = row.iter().map(|x| x.as_f64()).sum();
            if row.iter().any(|x| !(*x >= F::zero())) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::OutOfRange(format!(
                    "row {r} is not a probability vector"
                )));
            }
        }
        Ok(SobolDrawTable { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn arms(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn rows(&self) -> &[Vec<F>] {
        &self.vectors
    }

    /// CSV with header `arm_0,…,arm_M`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record((0..self.arms()).map(|m| format!("arm_{m}")))?;
        for row in &self.vectors {
            out.write_record(row.iter().map(|x| x.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        for (m, h) in headers.iter().enumerate() {
            if h != format!("arm_{m}") {
                return Err(Error::Parse(format!("unexpected column {h:?}")));
            }
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map(F::lit)
                        .map_err(|e| Error::Parse(e.to_string()))
                })
                .collect::<Result<Vec<F>>>()?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }
}

/// First `k` non-zero Sobol points in dimension `M + 1`, mapped to the
/// simplex with the design's concentrations. Deterministic.
pub fn build_sobol_table<F: Scalar>(spec: &DesignSpec<F>, k: usize) -> Result<SobolDrawTable<F>> {
    validate_design(spec)?;
    sobol_table(&spec.alpha, k)
}

/// [`build_sobol_table`] from the concentration vector alone.
pub fn sobol_table<F: Scalar>(alpha: &[F], k: usize) -> Result<SobolDrawTable<F>> {
    if k == 0 {
        return Err(Error::EmptyTable);
    }
    if alpha.len() < 2 {
        return Err(Error::EmptyArms);
    }
    let mut seq = SobolSequence::new(alpha.len())?;
    seq.next_raw();
    let rows = (0..k)
        .map(|_| map_to_simplex(&seq.next_point(), alpha))
        .collect::<Result<Vec<_>>>()?;
    SobolDrawTable::from_rows(rows)
}

/// Table row used for a cluster identifier under hash key `key`.
pub fn table_row(key: u64, cluster_id: &str, rows: usize) -> usize {
    (keyed_hash(key, cluster_id.as_bytes()) % rows as u64) as usize
}

/// Deployment-path assignment: each cluster takes the table row its
/// identifier hashes to, and units draw arms i.i.d. from that row.
///
/// Duplicate identifiers map to the same row. Unit draws for a cluster
/// use a stream derived from its identifier hash, so the result does not
/// depend on cluster order.
pub fn assign_from_table<F: Scalar, S: AsRef<str>>(
    cluster_ids: &[S],
    unit_counts: &[usize],
    table: &SobolDrawTable<F>,
    stream: RngStream,
) -> Result<AssignmentMatrix<F>> {
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    if cluster_ids.len() != unit_counts.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} cluster ids but {} unit counts",
            cluster_ids.len(),
            unit_counts.len()
        )));
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
        let row = &table.rows()[(h % table.len() as u64) as usize];
        let cum = cumulative(row);
        let mut rng = stream.derive(h).rng();
        labels.push((0..n).map(|_| categorical(&cum, &mut rng)).collect());
        probs.push(row.clone());
    }
    AssignmentMatrix::new(
        table.arms(),
        cluster_ids.iter().map(|s| s.as_ref().to_string()).collect(),
        labels,
        probs,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::AssignmentMode;

    #[test]
    fn matches_reference_points() {
        // scipy.stats.qmc.Sobol(d=40, scramble=False), points scaled by 1024
        let p1000 = [
            225, 99, 531, 693, 287, 929, 47, 921, 513, 71, 87, 261, 165, 393, 147, 379, 737, 353,
            1015, 743, 535, 563, 973, 553, 597, 929, 41, 1003, 61, 349, 151, 149, 303, 607, 821,
            789, 869, 851, 315, 491,
        ];
        let p77 = [
            856, 856, 8, 792, 856, 520, 232, 664, 184, 440, 136, 808, 504, 344, 1016, 72, 840, 904,
            808, 8, 152, 904, 888, 808, 872, 696, 824, 376, 168, 472, 1000, 760, 184, 56, 712, 792,
            568, 920, 136, 280,
        ];
        let mut seq = SobolSequence::new(40).unwrap();
        let pts: Vec<Vec<f64>> = (0..1001).map(|_| seq.next_point()).collect();
        for (d, &e) in p1000.iter().enumerate() {
            assert_eq!(pts[1000][d] * 1024.0, e as f64, "point 1000 dim {d}");
        }
        for (d, &e) in p77.iter().enumerate() {
            assert_eq!(pts[77][d] * 1024.0, e as f64, "point 77 dim {d}");
        }
        assert!(pts[0].iter().all(|&x| x == 0.0));
        assert!(pts[1].iter().all(|&x| x == 0.5));
    }

    #[test]
    fn unsupported_dimension() {
        assert!(matches!(
            SobolSequence::new(MAX_SOBOL_DIMENSION + 1),
            Err(Error::DimensionUnsupported { .. })
        ));
        let spec = DesignSpec::balanced(10, 5, MAX_SOBOL_DIMENSION, 1.0_f64);
        assert!(matches!(
            build_sobol_table(&spec, 4),
            Err(Error::DimensionUnsupported { .. })
        ));
    }

    #[test]
    fn first_row_is_uniform() {
        for &ab in &[1e-3_f64, 0.4, 50.0] {
            let spec = DesignSpec::balanced(10, 5, 2, ab);
            let t = build_sobol_table(&spec, 1).unwrap();
            for p in &t.rows()[0] {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn second_row_normalized() {
        let spec = DesignSpec::balanced(10, 5, 2, 0.7_f64);
        let t = build_sobol_table(&spec, 2).unwrap();
        let s: f64 = t.rows()[1].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let mut seq = SobolSequence::new(3).unwrap();
        seq.next_point();
        seq.next_point();
        assert!(seq.next_point().iter().all(|&x| x == 0.25 || x == 0.75));
    }

    #[test]
    fn table_mean_is_quasi_uniform() {
        let spec = DesignSpec::balanced(10, 5, 2, 1.0_f64);
        let t = build_sobol_table(&spec, 256).unwrap();
        for m in 0..3 {
            let mean = t.rows().iter().map(|r| r[m]).sum::<f64>() / 256.0;
            assert!((mean - 1.0 / 3.0).abs() < 0.02, "arm {m}: {mean}");
        }
        assert_eq!(t, build_sobol_table(&spec, 256).unwrap());
    }

    #[test]
    fn simplex_map_is_permutation_covariant() {
        let alpha = [0.3_f64, 1.7, 4.0, 0.05];
        let point = [0.12, 0.83, 0.41, 0.67];
        let base = map_to_simplex(&point, &alpha).unwrap();
        let perm = [2usize, 0, 3, 1];
        let pa: Vec<f64> = perm.iter().map(|&i| alpha[i]).collect();
        let pp: Vec<f64> = perm.iter().map(|&i| point[i]).collect();
        let out = map_to_simplex(&pp, &pa).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(out[k], base[i]);
        }
    }

    #[test]
    fn single_row_table_is_unit_level() {
        let spec = DesignSpec::balanced(10, 5, 2, 1.0_f64);
        let t = build_sobol_table(&spec, 1).unwrap();
        let ids: Vec<String> = (0..400).map(|j| format!("user{j}")).collect();
        let sizes = vec![25; 400];
        let a = assign_from_table(&ids, &sizes, &t, RngStream::new(3, 0)).unwrap();
        let n = 400.0 * 25.0;
        for m in 0..3 {
            let f = a.counts().iter().map(|c| c[m]).sum::<usize>() as f64 / n;
            let se = (2.0 / 9.0 / n).sqrt();
            assert!((f - 1.0 / 3.0).abs() < 3.0 * se, "arm {m}: {f}");
        }
    }

    #[test]
    fn deployment_is_deterministic_and_idempotent() {
        let spec = DesignSpec::balanced(10, 5, 2, 0.2_f64);
        let t = build_sobol_table(&spec, 16).unwrap();
        let ids = ["a", "b", "a", "zz"];
        let sizes = [3, 9, 3, 1];
        let s = RngStream::new(99, 0);
        let x = assign_from_table(&ids, &sizes, &t, s).unwrap();
        let y = assign_from_table(&ids, &sizes, &t, s).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.cluster_probs()[0], x.cluster_probs()[2]);
        assert_eq!(x.labels()[0], x.labels()[2]);
        assert_eq!(x.cluster_size(1), 9);
        let empty = SobolDrawTable::<f64> { vectors: vec![] };
        assert_eq!(
            assign_from_table(&ids, &sizes, &empty, s),
            Err(Error::EmptyTable)
        );
    }

    #[test]
    fn mode_dispatch_uses_table() {
        let spec = DesignSpec::balanced(30, 6, 2, 0.5_f64)
            .with_mode(AssignmentMode::SobolDirichlet { k: 1 });
        let a = crate::randomize::assign(&spec, RngStream::new(1, 0)).unwrap();
        for p in a.cluster_probs() {
            assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn csv_round_trip() {
        let spec = DesignSpec::balanced(10, 5, 3, 0.9_f64);
        let t = build_sobol_table(&spec, 8).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("arm_0,arm_1,arm_2,arm_3\n"));
        let back = SobolDrawTable::<f64>::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }
}
