//! Small dense linear-algebra and summation helpers shared by every module.
//!
//! All reductions over Monte Carlo samples go through [`gram`] / [`row_means`],
//! which split the sample axis into fixed-size chunks and combine the partial
//! results in chunk order. The result is therefore bit-identical for any
//! rayon thread count.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

/// Number of sample columns reduced per work item.
pub const REDUCE_CHUNK: usize = 4096;

/// Neumaier (improved Kahan) compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = NeumaierSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<NeumaierSum>().value()
}

fn chunk_ranges(m: usize) -> Vec<(usize, usize)> {
    (0..m.div_ceil(REDUCE_CHUNK))
        .map(|c| {
            let start = c * REDUCE_CHUNK;
            (start, (start + REDUCE_CHUNK).min(m))
        })
        .collect()
}

/// Row means of a `rows × M` matrix with deterministic chunked reduction.
pub fn row_means(values: &DMatrix<f64>) -> DVector<f64> {
    let (rows, m) = values.shape();
    if m == 0 {
        return DVector::zeros(rows);
    }
    let partials: Vec<Vec<f64>> = chunk_ranges(m)
        .into_par_iter()
        .map(|(a, b)| {
            (0..rows)
                .map(|i| compensated_sum((a..b).map(|j| values[(i, j)])))
                .collect()
        })
        .collect();
    DVector::from_fn(rows, |i, _| {
        compensated_sum(partials.iter().map(|p| p[i])) / m as f64
    })
}

/// Empirical cross moment `(1/M) · A · Bᵀ` for `A: a×M`, `B: b×M`.
pub fn gram(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.ncols(), "gram: sample counts differ");
    let m = a.ncols();
    let (ra, rb) = (a.nrows(), b.nrows());
    if m == 0 || ra == 0 || rb == 0 {
        return DMatrix::zeros(ra, rb);
    }
    let partials: Vec<DMatrix<f64>> = chunk_ranges(m)
        .into_par_iter()
        .map(|(s, e)| {
            let ac = a.columns(s, e - s);
            let bc = b.columns(s, e - s);
            ac * bc.transpose()
        })
        .collect();
    let mut out = DMatrix::zeros(ra, rb);
    for i in 0..ra {
        for j in 0..rb {
            out[(i, j)] = compensated_sum(partials.iter().map(|p| p[(i, j)])) / m as f64;
        }
    }
    out
}

/// Symmetric Gram `(1/M) · A · Aᵀ`, exactly symmetric.
pub fn gram_sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&gram(a, a))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// `‖a − b‖_F / ‖b‖_F` (absolute difference if `b` is zero).
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let nb = b.norm();
    let diff = (a - b).norm();
    if nb == 0.0 {
        diff
    } else {
        diff / nb
    }
}

pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 {
        return DVector::zeros(0);
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues
}

/// Smallest eigenvalue of the symmetric part of `m` (`+∞` for an empty matrix).
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Spectral condition number of a symmetric PSD matrix (`∞` if singular).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let ev = sym_eigenvalues(m);
    let max = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of an SPD matrix through Cholesky; `None` when not positive definite.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let chol = symmetrize(m).cholesky()?;
    Some(symmetrize(&chol.inverse()))
}

/// Moore–Penrose inverse of a symmetric PSD matrix, dropping eigenvalues below
/// `rel_cutoff · λ_max`. Returns the inverse and the retained rank.
pub fn sym_pinv(m: &DMatrix<f64>, rel_cutoff: f64) -> (DMatrix<f64>, usize) {
    let n = m.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let lmax = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let mut rank = 0;
    let inv_diag = DVector::from_iterator(
        n,
        eig.eigenvalues.iter().map(|&l| {
            if lmax > 0.0 && l > rel_cutoff * lmax {
                rank += 1;
                1.0 / l
            } else {
                0.0
            }
        }),
    );
    let u = &eig.eigenvectors;
    let inv = u * DMatrix::from_diagonal(&inv_diag) * u.transpose();
    (symmetrize(&inv), rank)
}

/// Selects the `rows × cols` submatrix with the given index lists.
pub fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neumaier_recovers_cancelled_terms() {
        let xs = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(compensated_sum(xs), 2.0);
    }

    #[test]
    fn gram_matches_naive_product() {
        let a = DMatrix::from_fn(3, 10_000, |i, j| ((i * 7 + j * 13) % 17) as f64 - 8.0);
        let b = DMatrix::from_fn(2, 10_000, |i, j| ((i * 5 + j * 3) % 11) as f64 - 5.0);
        let g = gram(&a, &b);
        let naive = &a * b.transpose() / 10_000.0;
        assert!((g - naive).amax() < 1e-12);
    }

    #[test]
    fn pinv_of_rank_deficient_matrix() {
        let v = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let m = &v * v.transpose();
        let (p, rank) = sym_pinv(&m, 1e-10);
        assert_eq!(rank, 1);
        // m · p · m = m
        assert!((&m * &p * &m - &m).amax() < 1e-12);
    }

    #[test]
    fn spd_inverse_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(spd_inverse(&m).is_none());
    }
}
