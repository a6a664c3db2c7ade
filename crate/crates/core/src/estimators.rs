//! Location/scatter estimators and their Monte Carlo benchmark against the
//! CRB and SCRB.
//!
//! Every scatter estimate is returned on the model's constraint surface so
//! its error lives in the same packed coordinates as the bounds.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::model::{pack, Constraint, ParamPartition, ResModel};
use crate::numeric::{min_eigenvalue, select_rows, symmetrize};
use crate::sampling::{sample_res, SampleBatch};
use crate::seed::derive_seed;

type TrialOutcome = Option<(DVector<f64>, usize)>;

/// Largest failure fraction for which a benchmark report is still valid.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Bootstrap resamples used for the standard error of the slack.
pub const BOOTSTRAP_RESAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorId {
    SampleMoments,
    Tyler,
    /// Huber M-estimator with threshold at the `q01` quantile of `χ²_N`.
    Huber {
        q01: f64,
    },
    /// Student-t maximum likelihood with fixed degrees of freedom.
    StudentT {
        nu: f64,
    },
}

impl EstimatorId {
    /// `sample_mean`, `tyler`, `huber:<q>`, `student_t:<nu>` (`inf` allowed).
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s, None),
        };
        match (name, arg) {
            ("sample_mean" | "sample_moments", None) => Some(EstimatorId::SampleMoments),
            ("tyler", None) => Some(EstimatorId::Tyler),
            ("huber", Some(a)) => {
                let q01: f64 = a.parse().ok()?;
                (q01 > 0.0 && q01 <= 1.0).then_some(EstimatorId::Huber { q01 })
            }
            ("student_t", Some(a)) => {
                let nu: f64 = a.parse().ok()?;
                (nu > 0.0).then_some(EstimatorId::StudentT { nu })
            }
            _ => None,
        }
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorId::SampleMoments => write!(f, "sample_mean"),
            EstimatorId::Tyler => write!(f, "tyler"),
            EstimatorId::Huber { q01 } => write!(f, "huber:{q01}"),
            EstimatorId::StudentT { nu } => write!(f, "student_t:{nu}"),
        }
    }
}

/// Stopping rule of the fixed-point estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPoint {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub mu: DVector<f64>,
    /// Scatter normalized onto the constraint surface.
    pub sigma: DMatrix<f64>,
    pub iterations: usize,
}

fn check_size(batch: &SampleBatch) -> Result<()> {
    if batch.len() <= batch.dim() {
        return Err(Error::Estimator(format!(
            "need more observations than dimensions (M = {}, N = {})",
            batch.len(),
            batch.dim()
        )));
    }
    Ok(())
}

fn normalized(sigma: &DMatrix<f64>, constraint: Constraint) -> Result<DMatrix<f64>> {
    let sym = symmetrize(sigma);
    if sym.clone().cholesky().is_none() {
        return Err(Error::Estimator(
            "scatter estimate is rank deficient".into(),
        ));
    }
    Ok(constraint.normalize(&sym))
}

/// Sample mean and unbiased covariance, the latter rescaled onto the
/// constraint.
pub fn sample_moments(batch: &SampleBatch, constraint: Constraint) -> Result<Estimate> {
    check_size(batch)?;
    let x = batch.points();
    let m = x.ncols() as f64;
    let mu = x.column_sum() / m;
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mu[i]);
    let cov = &centered * centered.transpose() / (m - 1.0);
    Ok(Estimate {
        mu,
        sigma: normalized(&cov, constraint)?,
        iterations: 0,
    })
}

/// Coordinatewise sample median.
pub fn coordinatewise_median(batch: &SampleBatch) -> DVector<f64> {
    let x = batch.points();
    DVector::from_fn(x.nrows(), |i, _| {
        let mut row: Vec<f64> = x.row(i).iter().copied().collect();
        row.sort_by(f64::total_cmp);
        let m = row.len();
        if m % 2 == 1 {
            row[m / 2]
        } else {
            0.5 * (row[m / 2 - 1] + row[m / 2])
        }
    })
}

fn mahalanobis_all(x: &DMatrix<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Estimator("scatter iterate lost positive definiteness".into()))?;
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mu[i]);
    let z = chol
        .l()
        .solve_lower_triangular(&centered)
        .expect("triangular factor is invertible");
    Ok(z.column_iter().map(|c| c.norm_squared()).collect())
}

/// Weighted second moment `(1/denom) Σ_m w_m d_m d_mᵀ` with `d_m = x_m − μ`.
fn weighted_scatter(x: &DMatrix<f64>, mu: &DVector<f64>, w: &[f64], denom: f64) -> DMatrix<f64> {
    let n = x.nrows();
    let scaled = DMatrix::from_fn(n, x.ncols(), |i, j| (x[(i, j)] - mu[i]) * w[j].sqrt());
    symmetrize(&(&scaled * scaled.transpose() / denom))
}

fn rel_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    (new - old).norm() / old.norm()
}

/// Tyler's shape estimator around a fixed center (the coordinatewise median
/// when `center` is `None`).
pub fn tyler(
    batch: &SampleBatch,
    center: Option<&DVector<f64>>,
    constraint: Constraint,
    fp: FixedPoint,
) -> Result<Estimate> {
    check_size(batch)?;
    let n = batch.dim();
    let mu = center
        .cloned()
        .unwrap_or_else(|| coordinatewise_median(batch));
    if mu.len() != n {
        return Err(Error::Shape("center has the wrong dimension".into()));
    }
    let x_all = batch.points();
    let keep: Vec<usize> = (0..x_all.ncols())
        .filter(|&j| (0..n).any(|i| x_all[(i, j)] != mu[i]))
        .collect();
    if keep.len() < x_all.ncols() {
        log::warn!(
            "tyler: {} observation(s) coincide with the center and are excluded",
            x_all.ncols() - keep.len()
        );
    }
    if keep.len() <= n {
        return Err(Error::Estimator(
            "too few observations away from the center".into(),
        ));
    }
    let x = x_all.select_columns(&keep);
    let mut sigma = constraint.normalize(&DMatrix::identity(n, n));
    let mut residual = f64::INFINITY;
    for iter in 1..=fp.max_iter {
        let t = mahalanobis_all(&x, &mu, &sigma)?;
        let w: Vec<f64> = t.iter().map(|t| n as f64 / t).collect();
        let next = normalized(&weighted_scatter(&x, &mu, &w, x.ncols() as f64), constraint)?;
        residual = rel_change(&next, &sigma);
        sigma = next;
        if residual <= fp.tol {
            return Ok(Estimate {
                mu,
                sigma,
                iterations: iter,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: fp.max_iter,
        residual,
    })
}

/// Joint location/scatter fixed point with location weights `u1(t)` and
/// scatter weights `u2(t)`, started at the median and identity.
fn joint_fixed_point<U1, U2>(
    batch: &SampleBatch,
    constraint: Constraint,
    fp: FixedPoint,
    u1: U1,
    u2: U2,
) -> Result<Estimate>
where
    U1: Fn(f64) -> f64,
    U2: Fn(f64) -> f64,
{
    check_size(batch)?;
    let n = batch.dim();
    let x = batch.points();
    let m = x.ncols() as f64;
    let mut mu = coordinatewise_median(batch);
    let mut sigma = DMatrix::identity(n, n);
    let mut residual = f64::INFINITY;
    for iter in 1..=fp.max_iter {
        let t = mahalanobis_all(x, &mu, &sigma)?;
        let w1: Vec<f64> = t.iter().map(|&t| u1(t)).collect();
        let w2: Vec<f64> = t.iter().map(|&t| u2(t)).collect();
        let wsum: f64 = w1.iter().sum();
        if !(wsum > 0.0) {
            return Err(Error::Estimator("all location weights vanished".into()));
        }
        let mu_next = x * DVector::from_column_slice(&w1) / wsum;
        let sigma_next = weighted_scatter(x, &mu_next, &w2, m);
        let scale = sigma.trace().sqrt();
        residual = rel_change(&sigma_next, &sigma).max((&mu_next - &mu).norm() / scale);
        mu = mu_next;
        sigma = sigma_next;
        if !residual.is_finite() {
            break;
        }
        if residual <= fp.tol {
            return Ok(Estimate {
                mu,
                sigma: normalized(&sigma, constraint)?,
                iterations: iter,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: fp.max_iter,
        residual,
    })
}

/// Huber M-estimator of location and scatter. The threshold is
/// `c² = F⁻¹_{χ²_N}(q01)`; `q01 = 1` gives unit weights.
pub fn huber_m(
    batch: &SampleBatch,
    q01: f64,
    constraint: Constraint,
    fp: FixedPoint,
) -> Result<Estimate> {
    let n = batch.dim() as f64;
    if !(q01 > 0.0 && q01 <= 1.0) {
        return Err(Error::Estimator(format!(
            "Huber tuning must lie in (0, 1], got {q01}"
        )));
    }
    let c2 = if q01 >= 1.0 {
        f64::INFINITY
    } else {
        ChiSquared::new(n)
            .map_err(|e| Error::Estimator(e.to_string()))?
            .inverse_cdf(q01)
    };
    if c2 <= n {
        return Err(Error::Estimator(format!(
            "Huber threshold c² = {c2:.4} must exceed the dimension {n} for a scatter solution to exist"
        )));
    }
    let c = c2.sqrt();
    joint_fixed_point(
        batch,
        constraint,
        fp,
        |t| if t <= c2 { 1.0 } else { c / t.sqrt() },
        |t| if t <= c2 { 1.0 } else { c2 / t },
    )
}

/// Student-t maximum likelihood by EM with weights `(N+ν)/(ν+t)`; an
/// infinite `ν` gives unit weights.
pub fn student_t_mle(
    batch: &SampleBatch,
    nu: f64,
    constraint: Constraint,
    fp: FixedPoint,
) -> Result<Estimate> {
    if !(nu > 0.0) {
        return Err(Error::Estimator(format!(
            "degrees of freedom must be positive, got {nu}"
        )));
    }
    let n = batch.dim() as f64;
    let w = move |t: f64| {
        if nu.is_infinite() {
            1.0
        } else {
            (n + nu) / (nu + t)
        }
    };
    joint_fixed_point(batch, constraint, fp, w, w)
}

pub fn run_estimator(
    id: EstimatorId,
    batch: &SampleBatch,
    constraint: Constraint,
    fp: FixedPoint,
) -> Result<Estimate> {
    match id {
        EstimatorId::SampleMoments => sample_moments(batch, constraint),
        EstimatorId::Tyler => tyler(batch, None, constraint, fp),
        EstimatorId::Huber { q01 } => huber_m(batch, q01, constraint, fp),
        EstimatorId::StudentT { nu } => student_t_mle(batch, nu, constraint, fp),
    }
}

/// Bounds the benchmark compares against (single-observation scale).
#[derive(Debug, Clone)]
pub struct BenchBounds {
    pub crb: DMatrix<f64>,
    pub scrb: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct EstimatorReport {
    pub id: EstimatorId,
    pub r: usize,
    pub m: usize,
    pub failures: usize,
    pub valid: bool,
    pub bias: DVector<f64>,
    /// Error covariance across trials (divisor `R_ok − 1`).
    pub emp_cov: DMatrix<f64>,
    /// `min eig(M·emp_cov − CRB)`.
    pub vs_crb: f64,
    pub se_vs_crb: f64,
    /// `min eig(M·emp_cov − SCRB)`.
    pub vs_scrb: Option<f64>,
    pub se_vs_scrb: Option<f64>,
    pub mean_iterations: f64,
    /// Per-trial interest-coordinate errors; `None` for failed trials.
    pub trial_errors: Vec<Option<DVector<f64>>>,
}

impl EstimatorReport {
    pub fn scaled_cov(&self) -> DMatrix<f64> {
        &self.emp_cov * self.m as f64
    }

    /// Since SCRB ⪰ CRB, the slack against the SCRB cannot exceed the slack
    /// against the CRB.
    pub fn bound_ordering_holds(&self) -> bool {
        self.vs_scrb
            .is_none_or(|s| !self.valid || s <= self.vs_crb + 1e-9)
    }
}

fn error_covariance(errors: &[&DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let q = errors[0].len();
    let r = errors.len() as f64;
    let mean = errors.iter().fold(DVector::zeros(q), |acc, e| acc + *e) / r;
    let mut cov = DMatrix::zeros(q, q);
    for e in errors {
        let d = *e - &mean;
        cov += &d * d.transpose();
    }
    (mean, symmetrize(&(cov / (r - 1.0))))
}

fn slack(errors: &[&DVector<f64>], m: usize, bound: &DMatrix<f64>) -> f64 {
    let (_, cov) = error_covariance(errors);
    min_eigenvalue(&(cov * m as f64 - bound))
}

fn bootstrap_se(errors: &[&DVector<f64>], m: usize, bound: &DMatrix<f64>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = errors.len();
    let stats: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let resample: Vec<&DVector<f64>> =
                (0..n).map(|_| errors[rng.random_range(0..n)]).collect();
            slack(&resample, m, bound)
        })
        .collect();
    let mean = stats.iter().sum::<f64>() / stats.len() as f64;
    (stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (stats.len() - 1) as f64).sqrt()
}

/// Runs every estimator on `r` independent batches of size `m`; trial `i`
/// draws from seed `derive_seed(seed, "bench", i)`.
#[allow(clippy::too_many_arguments)]
pub fn benchmark(
    model: &ResModel,
    estimators: &[EstimatorId],
    r: usize,
    m: usize,
    seed: u64,
    partition: &ParamPartition,
    bounds: &BenchBounds,
    fp: FixedPoint,
) -> Result<Vec<EstimatorReport>> {
    if r < 2 {
        return Err(Error::Estimator(format!(
            "benchmark needs at least 2 trials, got {r}"
        )));
    }
    let q = partition.q();
    if bounds.crb.nrows() != q || bounds.scrb.as_ref().is_some_and(|s| s.nrows() != q) {
        return Err(Error::Shape(
            "bounds do not match the interest dimension".into(),
        ));
    }
    let truth = pack(model.mu(), model.sigma());
    let idx = partition.interest_idx();
    let constraint = model.constraint();

    // trials[i][e] = (error, iterations) of estimator e in trial i
    let trials: Vec<Vec<TrialOutcome>> = (0..r)
        .into_par_iter()
        .map(|i| -> Result<Vec<TrialOutcome>> {
            let batch = sample_res(model, m, derive_seed(seed, "bench", i as u64))?;
            Ok(estimators
                .iter()
                .map(|&id| match run_estimator(id, &batch, constraint, fp) {
                    Ok(est) => {
                        let err = pack(&est.mu, &est.sigma) - &truth;
                        let err = select_rows(
                            &DMatrix::from_column_slice(err.len(), 1, err.as_slice()),
                            idx,
                        );
                        Some((err.column(0).into_owned(), est.iterations))
                    }
                    Err(e) => {
                        log::debug!("{id} failed in trial {i}: {e}");
                        None
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut reports = Vec::with_capacity(estimators.len());
    for (e, &id) in estimators.iter().enumerate() {
        let trial_errors: Vec<Option<DVector<f64>>> = trials
            .iter()
            .map(|t| t[e].as_ref().map(|(err, _)| err.clone()))
            .collect();
        let ok: Vec<&DVector<f64>> = trial_errors.iter().flatten().collect();
        let failures = r - ok.len();
        let valid = (failures as f64) <= MAX_FAILURE_RATE * r as f64 && ok.len() >= 2;
        let iters: Vec<usize> = trials
            .iter()
            .filter_map(|t| t[e].as_ref().map(|(_, it)| *it))
            .collect();
        let mean_iterations = if iters.is_empty() {
            f64::NAN
        } else {
            iters.iter().sum::<usize>() as f64 / iters.len() as f64
        };
        let report = if ok.len() >= 2 {
            let (bias, emp_cov) = error_covariance(&ok);
            let bseed = derive_seed(seed, "bootstrap", e as u64);
            EstimatorReport {
                id,
                r,
                m,
                failures,
                valid,
                vs_crb: slack(&ok, m, &bounds.crb),
                se_vs_crb: bootstrap_se(&ok, m, &bounds.crb, bseed),
                vs_scrb: bounds.scrb.as_ref().map(|s| slack(&ok, m, s)),
                se_vs_scrb: bounds.scrb.as_ref().map(|s| bootstrap_se(&ok, m, s, bseed)),
                bias,
                emp_cov,
                mean_iterations,
                trial_errors,
            }
        } else {
            EstimatorReport {
                id,
                r,
                m,
                failures,
                valid,
                bias: DVector::from_element(q, f64::NAN),
                emp_cov: DMatrix::from_element(q, q, f64::NAN),
                vs_crb: f64::NAN,
                se_vs_crb: f64::NAN,
                vs_scrb: bounds.scrb.as_ref().map(|_| f64::NAN),
                se_vs_scrb: bounds.scrb.as_ref().map(|_| f64::NAN),
                mean_iterations,
                trial_errors,
            }
        };
        reports.push(report);
    }
    Ok(reports)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:e}")).unwrap_or_else(|| "NA".into())
}

/// One row per estimator.
pub fn write_reports_csv<W: Write>(
    reports: &[EstimatorReport],
    mut w: W,
    meta: &[(&str, String)],
) -> Result<()> {
    for (k, v) in meta {
        writeln!(w, "# {k}={v}")?;
    }
    let q = reports.first().map(|r| r.bias.len()).unwrap_or(0);
    let mut header: Vec<String> = [
        "estimator",
        "R",
        "M",
        "failures",
        "valid",
        "mean_iterations",
        "vs_crb",
        "se_vs_crb",
        "vs_scrb",
        "se_vs_scrb",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..q).map(|i| format!("bias_{i}")));
    for i in 0..q {
        for j in 0..q {
            header.push(format!("mcov_{i}_{j}"));
        }
    }
    writeln!(w, "{}", header.join(","))?;
    for r in reports {
        let mut row = vec![
            r.id.to_string(),
            r.r.to_string(),
            r.m.to_string(),
            r.failures.to_string(),
            r.valid.to_string(),
            format!("{:e}", r.mean_iterations),
            format!("{:e}", r.vs_crb),
            format!("{:e}", r.se_vs_crb),
            opt(r.vs_scrb),
            opt(r.se_vs_scrb),
        ];
        row.extend(r.bias.iter().map(|v| format!("{v:e}")));
        let sc = r.scaled_cov();
        for i in 0..q {
            for j in 0..q {
                row.push(format!("{:e}", sc[(i, j)]));
            }
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Long format: one row per (estimator, trial, interest coordinate).
pub fn write_trials_csv<W: Write>(
    reports: &[EstimatorReport],
    mut w: W,
    meta: &[(&str, String)],
) -> Result<()> {
    for (k, v) in meta {
        writeln!(w, "# {k}={v}")?;
    }
    writeln!(w, "estimator,trial,coord,error")?;
    for r in reports {
        for (trial, err) in r.trial_errors.iter().enumerate() {
            match err {
                Some(e) => {
                    for (c, v) in e.iter().enumerate() {
                        writeln!(w, "{},{trial},{c},{v:e}", r.id)?;
                    }
                }
                None => writeln!(w, "{},{trial},NA,NA", r.id)?,
            }
        }
    }
    Ok(())
}
