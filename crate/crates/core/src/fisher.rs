//! Scores, Fisher information and the Cramér-Rao bound with a finite
//! dimensional nuisance, by the Schur-complement and projection routes.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hilbert::{cov0, residual, FunctionSample, GramPolicy, SpanBasis};
use crate::model::{
    pack_params, packed_len, shape_entries, unpack_params, ParamPartition, ResModel,
};
use crate::numeric::{
    condition_number, max_eigenvalue, min_eigenvalue, rel_frobenius, row_means, select,
    spd_inverse, symmetrize,
};
use crate::sampling::{SampleBatch, SAMPLE_CHUNK};

/// Efficient scores whose smallest covariance eigenvalue falls below this
/// fraction of the interest-score scale (squared) are flagged degenerate.
pub const DEGENERACY_RATIO: f64 = 1e-8;

/// Nuisance FIM blocks with a larger condition number count as singular.
pub const MAX_FIM_CONDITION: f64 = 1e12;

/// Stacked score `s_θ = (s_γ, s_η)` on a batch, rows in packed order.
#[derive(Debug, Clone)]
pub struct ScoreSample {
    full: FunctionSample,
    partition: ParamPartition,
    raw_means: DVector<f64>,
    raw_std: DVector<f64>,
}

impl ScoreSample {
    /// Wraps raw (uncentered) score evaluations; centering is applied here.
    pub fn new(values: DMatrix<f64>, fingerprint: u64, partition: ParamPartition) -> Result<Self> {
        if values.nrows() != partition.total() {
            return Err(Error::Shape(format!(
                "score has {} rows but the partition covers {} parameters",
                values.nrows(),
                partition.total()
            )));
        }
        let raw_means = row_means(&values);
        let full = FunctionSample::new(values, fingerprint)?;
        let raw_std = cov0(&full).diagonal().map(f64::sqrt);
        Ok(Self {
            full,
            partition,
            raw_means,
            raw_std,
        })
    }

    pub fn full(&self) -> &FunctionSample {
        &self.full
    }

    pub fn partition(&self) -> &ParamPartition {
        &self.partition
    }

    pub fn interest(&self) -> FunctionSample {
        self.full.rows(self.partition.interest_idx())
    }

    pub fn nuisance(&self) -> FunctionSample {
        self.full.rows(self.partition.nuisance_idx())
    }

    pub fn m(&self) -> usize {
        self.full.m()
    }

    /// Empirical row means before centering.
    pub fn raw_means(&self) -> &DVector<f64> {
        &self.raw_means
    }

    /// `|mean| · √M / std` per row; values above 4 deserve a look.
    pub fn mean_zscores(&self) -> DVector<f64> {
        let sqrt_m = (self.m() as f64).sqrt();
        DVector::from_fn(self.raw_means.len(), |i, _| {
            if self.raw_std[i] > 0.0 {
                self.raw_means[i].abs() * sqrt_m / self.raw_std[i]
            } else {
                0.0
            }
        })
    }
}

/// `∂Σ_NN/∂θ_k` for every shape coordinate, from the constraint.
fn eliminated_derivative(model: &ResModel) -> Vec<f64> {
    let n = model.dim();
    let k = model.constraint().normal(model.sigma_inv());
    let last = n - 1;
    shape_entries(n)
        .into_iter()
        .map(|(i, j)| {
            let tr = if i == j { k[(i, i)] } else { 2.0 * k[(i, j)] };
            -tr / k[(last, last)]
        })
        .collect()
}

/// Analytic score evaluated at every observation of the batch.
pub fn score_analytic(
    model: &ResModel,
    batch: &SampleBatch,
    partition: &ParamPartition,
) -> Result<ScoreSample> {
    batch.ensure_model(model)?;
    let n = model.dim();
    let d = packed_len(n);
    check_partition(partition, d)?;
    let m = batch.len();
    let entries = shape_entries(n);
    let dnn = eliminated_derivative(model);
    let sigma_inv = model.sigma_inv();
    let gen = model.generator();
    let last = n - 1;

    let mut values = DMatrix::zeros(d, m);
    values
        .as_mut_slice()
        .par_chunks_mut(d * SAMPLE_CHUNK)
        .enumerate()
        .try_for_each(|(c, out)| -> Result<()> {
            let mut diff = DVector::zeros(n);
            for (local, col) in out.chunks_mut(d).enumerate() {
                let idx = c * SAMPLE_CHUNK + local;
                let x = batch.observation(idx);
                for i in 0..n {
                    diff[i] = x[i] - model.mu()[i];
                }
                let w = sigma_inv * &diff;
                let t = diff.dot(&w);
                let psi = gen.psi(t);
                if !psi.is_finite() {
                    return Err(Error::Score {
                        index: idx,
                        detail: format!("psi is not finite at t = {t:e}"),
                    });
                }
                for i in 0..n {
                    col[i] = -2.0 * psi * w[i];
                }
                let g = |i: usize, j: usize| -0.5 * sigma_inv[(i, j)] - psi * w[i] * w[j];
                let g_nn = g(last, last);
                for (k, &(i, j)) in entries.iter().enumerate() {
                    let direct = if i == j { g(i, i) } else { 2.0 * g(i, j) };
                    col[n + k] = direct + g_nn * dnn[k];
                }
                if let Some(bad) = col.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Score {
                        index: idx,
                        detail: format!("score coordinate {bad} is not finite"),
                    });
                }
            }
            Ok(())
        })?;
    ScoreSample::new(values, batch.fingerprint(), partition.clone())
}

/// Central finite differences of the log density along each packed
/// coordinate, with the eliminated entry re-solved from the constraint.
pub fn score_fd(
    model: &ResModel,
    batch: &SampleBatch,
    partition: &ParamPartition,
    step: f64,
) -> Result<ScoreSample> {
    if !(step > 0.0) {
        return Err(Error::Shape(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    batch.ensure_model(model)?;
    let n = model.dim();
    let d = packed_len(n);
    check_partition(partition, d)?;
    let theta = pack_params(model);
    let m = batch.len();

    let perturbed = |k: usize, sign: f64| -> Result<ResModel> {
        let mut th = theta.clone();
        th[k] += sign * step;
        let (mu, sigma) = unpack_params(&th, n, model.constraint()).map_err(|e| Error::Score {
            index: 0,
            detail: format!("perturbing coordinate {k} left the constraint surface: {e}"),
        })?;
        ResModel::new(mu, sigma, model.generator().clone(), model.constraint())
    };

    let mut values = DMatrix::zeros(d, m);
    for k in 0..d {
        let plus = perturbed(k, 1.0)?;
        let minus = perturbed(k, -1.0)?;
        let row: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|idx| {
                let x = batch.observation(idx);
                (plus.logpdf_slice(x) - minus.logpdf_slice(x)) / (2.0 * step)
            })
            .collect();
        for (idx, v) in row.into_iter().enumerate() {
            values[(k, idx)] = v;
        }
    }
    ScoreSample::new(values, batch.fingerprint(), partition.clone())
}

fn check_partition(partition: &ParamPartition, d: usize) -> Result<()> {
    if partition.total() != d {
        return Err(Error::Shape(format!(
            "partition covers {} parameters but the model has {d}",
            partition.total()
        )));
    }
    Ok(())
}

/// Monte Carlo Fisher information `E₀{s sᵀ}`.
pub fn fim_mc(scores: &ScoreSample) -> DMatrix<f64> {
    cov0(scores.full())
}

/// `(F_γγ − F_γη F_ηη⁻¹ F_ηγ)⁻¹`.
pub fn crb_schur(fim: &DMatrix<f64>, partition: &ParamPartition) -> Result<DMatrix<f64>> {
    if fim.nrows() != partition.total() || fim.ncols() != partition.total() {
        return Err(Error::Shape("FIM size does not match the partition".into()));
    }
    let gi = partition.interest_idx();
    let ni = partition.nuisance_idx();
    let f_gg = select(fim, gi, gi);
    let schur = if ni.is_empty() {
        f_gg
    } else {
        let f_gn = select(fim, gi, ni);
        let f_nn = select(fim, ni, ni);
        let cond = condition_number(&f_nn);
        let chol = f_nn
            .cholesky()
            .filter(|_| cond <= MAX_FIM_CONDITION)
            .ok_or_else(|| {
                Error::SingularFim(format!("nuisance block is singular (condition {cond:.3e})"))
            })?;
        let solved = chol.solve(&f_gn.transpose());
        f_gg - &f_gn * solved
    };
    let schur = symmetrize(&schur);
    spd_inverse(&schur).map(|m| symmetrize(&m)).ok_or_else(|| {
        Error::SingularFim(format!(
            "Schur complement is not positive definite (condition {:.3e})",
            condition_number(&schur)
        ))
    })
}

/// Efficient score together with its degeneracy flag.
#[derive(Debug, Clone)]
pub struct EfficientScore {
    pub score: FunctionSample,
    pub degenerate: bool,
}

/// Residual of `s` after projection onto `span`, flagged when it collapses
/// relative to `s` itself.
pub fn residual_score(s: &FunctionSample, span: &SpanBasis) -> Result<EfficientScore> {
    let score = residual(s, span)?;
    let scale = max_eigenvalue(&cov0(s));
    let floor = DEGENERACY_RATIO * DEGENERACY_RATIO * scale;
    let degenerate = !(min_eigenvalue(&cov0(&score)) > floor);
    Ok(EfficientScore { score, degenerate })
}

/// `s* = s_γ − Π(s_γ | span{s_η})`.
pub fn efficient_score(scores: &ScoreSample) -> Result<EfficientScore> {
    let nuisance = scores.nuisance();
    let span = if nuisance.q() == 0 {
        SpanBasis::empty(scores.m(), scores.full().fingerprint())
    } else {
        SpanBasis::new(nuisance, GramPolicy::default())?
    };
    residual_score(&scores.interest(), &span)
}

/// `I* = C₀(s*)`.
pub fn efficient_fim(scores: &ScoreSample) -> Result<DMatrix<f64>> {
    Ok(cov0(&efficient_score(scores)?.score))
}

/// Inverse of an efficient FIM, refusing degenerate efficient scores.
pub fn invert_efficient(eff: &EfficientScore) -> Result<DMatrix<f64>> {
    if eff.degenerate {
        return Err(Error::NonIdentifiable(
            "efficient score vanishes in some direction; the interest parameter is confounded with the nuisance".into(),
        ));
    }
    let fim = cov0(&eff.score);
    spd_inverse(&fim).map(|m| symmetrize(&m)).ok_or_else(|| {
        Error::NonIdentifiable(format!(
            "efficient FIM is not positive definite (condition {:.3e})",
            condition_number(&fim)
        ))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Schur,
    Projection,
}

impl Route {
    pub fn as_str(&self) -> &'static str {
        match self {
            Route::Schur => "schur",
            Route::Projection => "projection",
        }
    }
}

/// Both CRB routes on one batch, with diagnostics.
#[derive(Debug, Clone)]
pub struct BoundResult {
    pub fim: DMatrix<f64>,
    pub crb_schur: DMatrix<f64>,
    pub crb_projection: DMatrix<f64>,
    pub efficient_fim: DMatrix<f64>,
    /// Route reported as authoritative.
    pub route: Route,
    pub m: usize,
    pub seed: u64,
    pub model_fingerprint: u64,
    pub batch_fingerprint: u64,
    /// `‖crb_projection − crb_schur‖_F / ‖crb_schur‖_F`.
    pub agreement: f64,
    pub fim_condition: f64,
    pub nuisance_condition: f64,
    pub efficient_condition: f64,
    pub partition: ParamPartition,
}

impl BoundResult {
    /// The authoritative bound.
    pub fn crb(&self) -> &DMatrix<f64> {
        match self.route {
            Route::Schur => &self.crb_schur,
            Route::Projection => &self.crb_projection,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W, meta: &[(&str, String)]) -> Result<()> {
        for (k, v) in meta {
            writeln!(w, "# {k}={v}")?;
        }
        writeln!(w, "# model_fingerprint={:016x}", self.model_fingerprint)?;
        writeln!(w, "# batch_fingerprint={:016x}", self.batch_fingerprint)?;
        writeln!(w, "# M={}", self.m)?;
        writeln!(w, "# seed={}", self.seed)?;
        writeln!(w, "# route={}", self.route.as_str())?;
        writeln!(w, "# route_agreement={:e}", self.agreement)?;
        writeln!(w, "# fim_condition={:e}", self.fim_condition)?;
        writeln!(w, "# nuisance_condition={:e}", self.nuisance_condition)?;
        writeln!(
            w,
            "# efficient_fim_condition={:e}",
            self.efficient_condition
        )?;
        writeln!(w, "block,row,col,value")?;
        for (name, mat) in [
            ("fim", &self.fim),
            ("crb_schur", &self.crb_schur),
            ("crb_projection", &self.crb_projection),
            ("efficient_fim", &self.efficient_fim),
        ] {
            for i in 0..mat.nrows() {
                for j in 0..mat.ncols() {
                    writeln!(w, "{name},{i},{j},{:e}", mat[(i, j)])?;
                }
            }
        }
        Ok(())
    }
}

/// Scores, FIM and both CRB routes for `model` on `batch`.
pub fn compute_bounds(
    model: &ResModel,
    batch: &SampleBatch,
    partition: &ParamPartition,
) -> Result<BoundResult> {
    let scores = score_analytic(model, batch, partition)?;
    bounds_from_scores(&scores, model.fingerprint(), batch.seed())
}

pub fn bounds_from_scores(
    scores: &ScoreSample,
    model_fingerprint: u64,
    seed: u64,
) -> Result<BoundResult> {
    let partition = scores.partition().clone();
    let fim = fim_mc(scores);
    let crb_s = crb_schur(&fim, &partition)?;
    let eff = efficient_score(scores)?;
    let crb_p = invert_efficient(&eff)?;
    let efficient_fim = cov0(&eff.score);
    let ni = partition.nuisance_idx();
    Ok(BoundResult {
        agreement: rel_frobenius(&crb_p, &crb_s),
        fim_condition: condition_number(&fim),
        nuisance_condition: if ni.is_empty() {
            1.0
        } else {
            condition_number(&select(&fim, ni, ni))
        },
        efficient_condition: condition_number(&efficient_fim),
        fim,
        crb_schur: crb_s,
        crb_projection: crb_p,
        efficient_fim,
        route: Route::Projection,
        m: scores.m(),
        seed,
        model_fingerprint,
        batch_fingerprint: scores.full().fingerprint(),
        partition,
    })
}
