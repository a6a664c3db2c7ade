//! Empirical Hilbert space of zero-mean, square-integrable functions.
//!
//! A function `h: ℝ^N → ℝ^q` is represented by its values on the shared
//! batch, a `q × M` matrix. Expectations are batch means, so projections are
//! exact least-squares problems on that batch.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{
    compensated_sum, condition_number, gram, gram_sym, row_means, select_rows, sym_pinv,
    NeumaierSum, REDUCE_CHUNK,
};

/// Values of a centered function on one batch (column `m` is `h(x_m)`).
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionSample {
    values: DMatrix<f64>,
    fingerprint: u64,
}

impl FunctionSample {
    /// Centers every row and ties the sample to a batch fingerprint.
    pub fn new(mut values: DMatrix<f64>, fingerprint: u64) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (q, _) = values.shape();
            return Err(Error::Shape(format!(
                "function sample has a non-finite value at row {}, sample {}",
                pos % q.max(1),
                pos / q.max(1)
            )));
        }
        let means = row_means(&values);
        for mut col in values.column_iter_mut() {
            col -= &means;
        }
        Ok(Self {
            values,
            fingerprint,
        })
    }

    pub fn zeros(q: usize, m: usize, fingerprint: u64) -> Self {
        Self {
            values: DMatrix::zeros(q, m),
            fingerprint,
        }
    }

    pub fn q(&self) -> usize {
        self.values.nrows()
    }

    pub fn m(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn rows(&self, idx: &[usize]) -> FunctionSample {
        FunctionSample {
            values: select_rows(&self.values, idx),
            fingerprint: self.fingerprint,
        }
    }

    /// Vertical concatenation of samples from one batch.
    pub fn stack(parts: &[&FunctionSample]) -> Result<FunctionSample> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to stack".into()))?;
        let m = first.m();
        for p in parts {
            same_batch(first, p)?;
            if p.m() != m {
                return Err(Error::Shape("stacked samples differ in length".into()));
            }
        }
        let q: usize = parts.iter().map(|p| p.q()).sum();
        let mut values = DMatrix::zeros(q, m);
        let mut row = 0;
        for p in parts {
            values.rows_mut(row, p.q()).copy_from(&p.values);
            row += p.q();
        }
        Ok(FunctionSample {
            values,
            fingerprint: first.fingerprint,
        })
    }

    /// `C · h` for a fixed `p × q` matrix `C`.
    pub fn transform(&self, c: &DMatrix<f64>) -> Result<FunctionSample> {
        if c.ncols() != self.q() {
            return Err(Error::Shape(format!(
                "cannot apply a {}x{} matrix to a {}-dimensional function",
                c.nrows(),
                c.ncols(),
                self.q()
            )));
        }
        FunctionSample::new(c * &self.values, self.fingerprint)
    }

    pub fn sub(&self, other: &FunctionSample) -> Result<FunctionSample> {
        same_batch(self, other)?;
        if self.values.shape() != other.values.shape() {
            return Err(Error::Shape(
                "difference of functions with different shapes".into(),
            ));
        }
        FunctionSample::new(&self.values - &other.values, self.fingerprint)
    }

    /// Squared empirical norm `⟨h, h⟩`.
    pub fn norm_sq(&self) -> f64 {
        inner_unchecked(self, self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

fn same_batch(a: &FunctionSample, b: &FunctionSample) -> Result<()> {
    if a.fingerprint != b.fingerprint || a.m() != b.m() {
        return Err(Error::BatchMismatch {
            left: a.fingerprint,
            right: b.fingerprint,
        });
    }
    Ok(())
}

fn inner_unchecked(h1: &FunctionSample, h2: &FunctionSample) -> f64 {
    let m = h1.m();
    if m == 0 {
        return 0.0;
    }
    let q = h1.q();
    let (a, b) = (h1.values.as_slice(), h2.values.as_slice());
    let partials: Vec<f64> = (0..m.div_ceil(REDUCE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let start = c * REDUCE_CHUNK * q;
            let end = ((c + 1) * REDUCE_CHUNK).min(m) * q;
            let mut acc = NeumaierSum::new();
            for i in start..end {
                acc.add(a[i] * b[i]);
            }
            acc.value()
        })
        .collect();
    compensated_sum(partials) / m as f64
}

/// `⟨h1, h2⟩ = (1/M) Σ_m h1(x_m)ᵀ h2(x_m)`.
pub fn inner(h1: &FunctionSample, h2: &FunctionSample) -> Result<f64> {
    same_batch(h1, h2)?;
    if h1.q() != h2.q() {
        return Err(Error::Shape(format!(
            "inner product of {}- and {}-dimensional functions",
            h1.q(),
            h2.q()
        )));
    }
    Ok(inner_unchecked(h1, h2))
}

/// Covariance `C₀(h) = E₀{h hᵀ}`.
pub fn cov0(h: &FunctionSample) -> DMatrix<f64> {
    gram_sym(&h.values)
}

/// Cross moment `E₀{h vᵀ}`.
pub fn cross_cov(h: &FunctionSample, v: &FunctionSample) -> Result<DMatrix<f64>> {
    same_batch(h, v)?;
    Ok(gram(&h.values, &v.values))
}

/// How a span's Gram matrix is inverted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularization {
    /// Exact inverse; fails with `SingularSpan` above `max_condition`.
    None,
    /// Eigen-decomposition pseudo-inverse with a relative eigenvalue cutoff.
    PseudoInverse,
    /// Ridge `ε = 1e-8 · tr(C)/k` added before inversion.
    Ridge,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GramPolicy {
    pub regularization: Regularization,
    pub rel_cutoff: f64,
    pub max_condition: f64,
}

impl Default for GramPolicy {
    fn default() -> Self {
        Self {
            regularization: Regularization::PseudoInverse,
            rel_cutoff: 1e-10,
            max_condition: 1e10,
        }
    }
}

impl GramPolicy {
    pub fn strict() -> Self {
        Self {
            regularization: Regularization::None,
            ..Self::default()
        }
    }
}

/// Span of `k` scalar functions `v₁..v_k` on one batch.
#[derive(Debug, Clone)]
pub struct SpanBasis {
    basis: FunctionSample,
    gram: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
    gram_rank: usize,
    condition: f64,
}

impl SpanBasis {
    pub fn new(basis: FunctionSample, policy: GramPolicy) -> Result<Self> {
        let gram = cov0(&basis);
        let k = basis.q();
        let condition = condition_number(&gram);
        let (gram_inv, gram_rank) = match policy.regularization {
            Regularization::None => {
                if k > 0 && !(condition <= policy.max_condition) {
                    return Err(Error::SingularSpan { condition, k: None });
                }
                sym_pinv(&gram, 0.0)
            }
            Regularization::PseudoInverse => sym_pinv(&gram, policy.rel_cutoff),
            Regularization::Ridge => {
                let eps = if k > 0 {
                    1e-8 * gram.trace() / k as f64
                } else {
                    0.0
                };
                let ridged = &gram + DMatrix::identity(k, k) * eps;
                sym_pinv(&ridged, 0.0)
            }
        };
        Ok(Self {
            basis,
            gram,
            gram_inv,
            gram_rank,
            condition,
        })
    }

    /// The trivial span `{0}` on a batch of `m` samples.
    pub fn empty(m: usize, fingerprint: u64) -> Self {
        Self {
            basis: FunctionSample::zeros(0, m, fingerprint),
            gram: DMatrix::zeros(0, 0),
            gram_inv: DMatrix::zeros(0, 0),
            gram_rank: 0,
            condition: 1.0,
        }
    }

    pub fn k(&self) -> usize {
        self.basis.q()
    }

    pub fn basis(&self) -> &FunctionSample {
        &self.basis
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn gram_rank(&self) -> usize {
        self.gram_rank
    }

    pub fn condition_number(&self) -> f64 {
        self.condition
    }

    /// An empirically orthonormal basis of the same span.
    pub fn orthonormalized(&self) -> Result<SpanBasis> {
        let k = self.k();
        if k == 0 {
            return Ok(self.clone());
        }
        let eig = nalgebra::SymmetricEigen::new(self.gram.clone());
        let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..k)
            .filter(|&i| eig.eigenvalues[i] > 1e-10 * lmax)
            .collect();
        let w = DMatrix::from_fn(keep.len(), k, |r, c| {
            eig.eigenvectors[(c, keep[r])] / eig.eigenvalues[keep[r]].sqrt()
        });
        SpanBasis::new(self.basis.transform(&w)?, GramPolicy::default())
    }
}

/// Coefficient matrix `Â = E₀{h vᵀ} C₀⁻¹(v)` of the projection onto a span.
pub fn projection_coefficients(h: &FunctionSample, span: &SpanBasis) -> Result<DMatrix<f64>> {
    same_batch(h, &span.basis)?;
    if span.k() == 0 {
        return Ok(DMatrix::zeros(h.q(), 0));
    }
    Ok(cross_cov(h, &span.basis)? * &span.gram_inv)
}

/// Orthogonal projection `Π(h | span) = Â v`.
pub fn project_span(h: &FunctionSample, span: &SpanBasis) -> Result<FunctionSample> {
    let coef = projection_coefficients(h, span)?;
    if span.k() == 0 {
        return Ok(FunctionSample::zeros(h.q(), h.m(), h.fingerprint));
    }
    span.basis.transform(&coef)
}

/// `h − Π(h | span)`.
pub fn residual(h: &FunctionSample, span: &SpanBasis) -> Result<FunctionSample> {
    let proj = project_span(h, span)?;
    h.sub(&proj)
}
