//! Packed parameter vector and interest/nuisance partitions.
//!
//! Layout: `(μ₁..μ_N, vech(Σ) without Σ_NN)`, where `vech` runs over the lower
//! triangle row by row: `Σ₀₀, Σ₁₀, Σ₁₁, Σ₂₀, …`. The last diagonal entry is
//! eliminated by the scale constraint and recomputed on unpacking.

use nalgebra::{DMatrix, DVector};

use super::res::{Constraint, ResModel};
use crate::error::{Error, Result};

pub fn vech_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Number of free shape coordinates after the constraint.
pub fn shape_len(n: usize) -> usize {
    vech_len(n) - 1
}

/// Total length of the packed parameter vector.
pub fn packed_len(n: usize) -> usize {
    n + shape_len(n)
}

/// `(row, col)` entries of Σ addressed by the shape coordinates, in order.
pub fn shape_entries(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(shape_len(n));
    for i in 0..n {
        for j in 0..=i {
            if !(i == n - 1 && j == n - 1) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Human-readable labels for the packed coordinates (`mu[i]`, `sigma[i,j]`).
pub fn param_labels(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| format!("mu[{i}]"))
        .chain(
            shape_entries(n)
                .into_iter()
                .map(|(i, j)| format!("sigma[{i},{j}]")),
        )
        .collect()
}

pub fn pack(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> DVector<f64> {
    let n = mu.len();
    let entries = shape_entries(n);
    DVector::from_iterator(
        packed_len(n),
        mu.iter()
            .copied()
            .chain(entries.iter().map(|&(i, j)| sigma[(i, j)])),
    )
}

pub fn pack_params(model: &ResModel) -> DVector<f64> {
    pack(model.mu(), model.sigma())
}

/// Rebuilds `(μ, Σ)` from a packed vector, solving the constraint for Σ_NN.
pub fn unpack_params(
    theta: &DVector<f64>,
    n: usize,
    constraint: Constraint,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if n == 0 || theta.len() != packed_len(n) {
        return Err(Error::Shape(format!(
            "packed vector of length {} does not match dimension {n}",
            theta.len()
        )));
    }
    let mu = DVector::from_iterator(n, theta.iter().take(n).copied());
    let mut sigma = DMatrix::zeros(n, n);
    for (k, (i, j)) in shape_entries(n).into_iter().enumerate() {
        let v = theta[n + k];
        sigma[(i, j)] = v;
        sigma[(j, i)] = v;
    }
    let last = n - 1;
    sigma[(last, last)] = match constraint {
        Constraint::TraceN => n as f64 - (0..last).map(|i| sigma[(i, i)]).sum::<f64>(),
        Constraint::Det1 => {
            if n == 1 {
                1.0
            } else {
                let a = sigma.view((0, 0), (last, last)).clone_owned();
                let b = sigma.view((last, 0), (1, last)).transpose();
                let chol = a.cholesky().ok_or_else(|| {
                    Error::Model("leading block of the scatter is not positive definite".into())
                })?;
                let det_a = chol.determinant();
                let ainv_b = chol.solve(&b);
                1.0 / det_a + b.dot(&ainv_b)
            }
        }
    };
    if !sigma.iter().all(|v| v.is_finite()) || sigma.clone().cholesky().is_none() {
        return Err(Error::Model(
            "packed parameters imply a scatter that is not positive definite".into(),
        ));
    }
    Ok((mu, sigma))
}

/// Which block of the packed vector is of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interest {
    Mu,
    Shape,
    MuShape,
}

impl Interest {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "mu" => Some(Interest::Mu),
            "shape" => Some(Interest::Shape),
            "mu+shape" | "shape+mu" => Some(Interest::MuShape),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Interest::Mu => "mu",
            Interest::Shape => "shape",
            Interest::MuShape => "mu+shape",
        }
    }
}

/// Split of the packed parameter indices into interest (γ) and nuisance (η).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPartition {
    interest_idx: Vec<usize>,
    nuisance_idx: Vec<usize>,
}

impl ParamPartition {
    pub fn new(interest_idx: Vec<usize>, total: usize) -> Result<Self> {
        if interest_idx.is_empty() {
            return Err(Error::Shape(
                "partition needs at least one interest coordinate".into(),
            ));
        }
        let mut seen = vec![false; total];
        for &i in &interest_idx {
            if i >= total || seen[i] {
                return Err(Error::Shape(format!(
                    "interest index {i} is out of range or repeated (total {total})"
                )));
            }
            seen[i] = true;
        }
        let nuisance_idx = (0..total).filter(|i| !seen[*i]).collect();
        Ok(Self {
            interest_idx,
            nuisance_idx,
        })
    }

    pub fn for_interest(interest: Interest, n: usize) -> Result<Self> {
        let total = packed_len(n);
        let idx: Vec<usize> = match interest {
            Interest::Mu => (0..n).collect(),
            Interest::Shape => (n..total).collect(),
            Interest::MuShape => (0..total).collect(),
        };
        Self::new(idx, total)
    }

    pub fn interest_idx(&self) -> &[usize] {
        &self.interest_idx
    }

    pub fn nuisance_idx(&self) -> &[usize] {
        &self.nuisance_idx
    }

    pub fn q(&self) -> usize {
        self.interest_idx.len()
    }

    pub fn r(&self) -> usize {
        self.nuisance_idx.len()
    }

    pub fn total(&self) -> usize {
        self.q() + self.r()
    }
}
