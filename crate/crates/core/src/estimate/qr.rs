//! Householder QR with grouped column pivoting.
//!
//! Columns are split into a protected leading group and a free group.
//! Pivoting happens within a group only, so every protected column is
//! factored before any free column. A candidate whose residual norm
//! falls below `tol · |R_00|` is dropped together with the rest of its
//! group (they are no larger).

use crate::scalar::Scalar;

const TIE_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct PivotedQr<F> {
    /// Original column indices, in pivot order.
    pub order: Vec<usize>,
    /// Upper-triangular factor, `rank × rank`, row-major.
    pub r: Vec<Vec<F>>,
    /// First `rank` entries of `Qᵀy`.
    pub qty: Vec<F>,
    pub dropped: Vec<usize>,
}

impl<F: Scalar> PivotedQr<F> {
    pub fn rank(&self) -> usize {
        self.order.len()
    }

    /// Solves `R b = Qᵀy`; coefficients are in pivot order.
    pub fn solve(&self) -> Vec<F> {
        back_substitute(&self.r, &self.qty)
    }

    /// `(RᵀR)⁻¹` in pivot order.
    pub fn gram_inverse(&self) -> Vec<Vec<F>> {
        let k = self.rank();
        let rinv = upper_inverse(&self.r);
        let mut out = vec![vec![F::zero(); k]; k];
        for i in 0..k {
            for j in i..k {
                let mut s = F::zero();
                for l in j..k {
                    s = s + rinv[i][l] * rinv[j][l];
                }
                out[i][j] = s;
                out[j][i] = s;
            }
        }
        out
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

fn back_substitute<F: Scalar>(r: &[Vec<F>], b: &[F]) -> Vec<F> {
    let k = r.len();
    let mut x = vec![F::zero(); k];
    for i in (0..k).rev() {
        let mut s = b[i];
        for j in i + 1..k {
            s = s - r[i][j] * x[j];
        }
        x[i] = s / r[i][i];
    }
    x
}

fn upper_inverse<F: Scalar>(r: &[Vec<F>]) -> Vec<Vec<F>> {
    let k = r.len();
    let mut inv = vec![vec![F::zero(); k]; k];
    for col in 0..k {
        let mut e = vec![F::zero(); k];
        e[col] = F::one();
        let x = back_substitute(r, &e);
        for row in 0..k {
            inv[row][col] = x[row];
        }
    }
    inv
}

/// Factors the columns `cols` (each of length `N`) against `y`.
///
/// The first `protected` columns form the protected group.
pub fn pivoted_qr<F: Scalar>(cols: &[Vec<F>], y: &[F], protected: usize, tol: F) -> PivotedQr<F> {
    let n = y.len();
    let p = cols.len();
    let mut work: Vec<Vec<F>> = cols.to_vec();
    let mut rhs = y.to_vec();
    let mut order = Vec::new();
    let mut dropped = Vec::new();
    let mut r_cols: Vec<Vec<F>> = Vec::new();
    let mut leading: Option<F> = None;
    let mut factored = vec![false; p];

    let groups = [
        (0..protected.min(p)).collect::<Vec<_>>(),
        (protected.min(p)..p).collect(),
    ];
    for group in groups {
        let mut remaining = group;
        while !remaining.is_empty() {
            let k = order.len();
            let norm = |c: usize| dot(&work[c][k..], &work[c][k..]).sqrt();
            let norms: Vec<F> = remaining.iter().map(|&c| norm(c)).collect();
            let best = norms.iter().fold(-F::one(), |a, &x| a.max(x));
            // near-ties go to the lowest original index so the choice
            // does not hinge on rounding
            let cut = best * (F::one() - F::lit(TIE_TOL));
            let pos = (0..remaining.len())
                .filter(|&i| norms[i] >= cut)
                .min_by_key(|&i| remaining[i])
                .expect("nonempty");
            let threshold = match leading {
                Some(l) => tol * l,
                None => F::zero(),
            };
            if !(best > threshold) || k >= n {
                for &d in &remaining {
                    factored[d] = true;
                }
                dropped.append(&mut remaining);
                break;
            }
            let c = remaining.remove(pos);
            let chosen = norms[pos];
            if leading.is_none() {
                leading = Some(chosen);
            }
            // Householder vector for work[c][k..]
            let x0 = work[c][k];
            let alpha = if x0 >= F::zero() { -chosen } else { chosen };
            let mut v: Vec<F> = work[c][k..].to_vec();
            v[0] = v[0] - alpha;
            let vnorm2 = dot(&v, &v);
            let apply = |col: &mut [F]| {
                if vnorm2 > F::zero() {
                    let s = (F::one() + F::one()) * dot(&v, &col[k..]) / vnorm2;
                    for (x, &vi) in col[k..].iter_mut().zip(&v) {
                        *x = *x - s * vi;
                    }
                }
            };
            for (other, col) in work.iter_mut().enumerate() {
                if !factored[other] {
                    apply(col);
                }
            }
            factored[c] = true;
            apply(&mut rhs);
            order.push(c);
            r_cols.push(work[c][..=k].to_vec());
        }
    }
    let rank = order.len();
    let mut r = vec![vec![F::zero(); rank]; rank];
    for (j, col) in r_cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            r[i][j] = x;
        }
    }
    PivotedQr {
        order,
        r,
        qty: rhs[..rank].to_vec(),
        dropped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        // y = 1 + 2x on x = 0, 1, 2
        let cols = vec![vec![1.0_f64, 1.0, 1.0], vec![0.0, 1.0, 2.0]];
        let qr = pivoted_qr(&cols, &[1.0, 3.0, 5.0], 1, 1e-10);
        assert_eq!(qr.order, vec![0, 1]);
        let b = qr.solve();
        assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn drops_collinear_free_column() {
        let cols = vec![
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 1.0],
            vec![2.0, 2.0, 0.0, 0.0],
        ];
        let qr = pivoted_qr(&cols, &[1.0, 2.0, 3.0, 4.0], 2, 1e-10);
        assert_eq!(qr.order, vec![0, 1]);
        assert_eq!(qr.dropped, vec![2]);
    }

    #[test]
    fn protected_columns_come_first() {
        // free column has the largest norm but is factored after protected ones
        let cols = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![5.0, 5.0, 5.0],
        ];
        let qr = pivoted_qr(&cols, &[1.0, 2.0, 3.0], 2, 1e-10);
        assert_eq!(&qr.order[..2], &[0, 1]);
        assert_eq!(qr.order[2], 2);
    }
}
