//! Parametric submodels obtained by tilting the density generator, sieve
//! nuisance tangent spaces and the semiparametric CRB as a monotone limit.
//!
//! A submodel of size `k` replaces the radial law `f_t` of the base model by
//! `f_t(t) · c(Σ_j η_j b_j(t)) / A(η)`, where `c` is a tilt link with
//! `c(0) = c'(0) = 1`. Its nuisance score at `η = 0` is the centered
//! `b_j(t)`, whatever the link.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fisher::{
    bounds_from_scores, invert_efficient, residual_score, score_analytic, EfficientScore,
    ScoreSample,
};
use crate::hilbert::{cov0, FunctionSample, GramPolicy, SpanBasis};
use crate::model::{DensityGenerator, ParamPartition, ResModel};
use crate::numeric::{frobenius, min_eigenvalue};
use crate::quad::integrate_to_inf;
use crate::sampling::{sample_res, SampleBatch, SAMPLE_CHUNK};

/// Radius of the tilt ball in which submodels must stay normalizable.
pub const WORKING_TILT: f64 = 0.05;

/// Default relative Frobenius tolerance for sieve stabilization.
pub const DEFAULT_RTOL: f64 = 1e-3;

/// Loewner tolerance for the monotonicity and dominance checks.
pub const MONOTONE_TOL: f64 = 1e-9;

/// Number of logit-spaced nodes of the discretized radial law used to build
/// the orthonormal polynomial recurrence.
const STIELTJES_NODES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisFamily {
    /// Polynomials in `ln(1+t)`, orthonormal under the base radial law.
    PolyLogT,
    /// Piecewise-linear B-splines in `u = F_t(t)` on a uniform knot grid.
    BSplineQuantile,
}

impl BasisFamily {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "polylogt" | "polylog" | "poly_log_t" => Some(BasisFamily::PolyLogT),
            "bspline" | "bsplinequantile" | "bspline_quantile" => {
                Some(BasisFamily::BSplineQuantile)
            }
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BasisFamily::PolyLogT => "polylogt",
            BasisFamily::BSplineQuantile => "bspline_quantile",
        }
    }

    /// Link used by [`build_submodel`] for this family.
    pub fn default_link(&self) -> TiltLink {
        match self {
            BasisFamily::PolyLogT => TiltLink::Logistic,
            BasisFamily::BSplineQuantile => TiltLink::Exponential,
        }
    }
}

impl fmt::Display for BasisFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the linear tilt `η·b(t)` multiplies the radial law.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TiltLink {
    /// `c(x) = exp(x)`.
    Exponential,
    /// `c(x) = 2 / (1 + exp(−2x))`, bounded so any tilt stays normalizable.
    Logistic,
}

impl TiltLink {
    pub fn ln_c(&self, x: f64) -> f64 {
        match self {
            TiltLink::Exponential => x,
            TiltLink::Logistic => std::f64::consts::LN_2 - ln_1p_exp(-2.0 * x),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TiltLink::Exponential => "exponential",
            TiltLink::Logistic => "logistic",
        }
    }
}

fn ln_1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub type TiltFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Three-term recurrence of polynomials in `s = ln(1+t)` orthonormal under
/// a discretized radial law.
#[derive(Debug, Clone)]
pub struct OrthoPolyLog {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl OrthoPolyLog {
    pub fn new(generator: &DensityGenerator, degree: usize) -> Result<Self> {
        let half = 1e12f64.ln();
        let h = 2.0 * half / STIELTJES_NODES as f64;
        let mut nodes = Vec::with_capacity(STIELTJES_NODES);
        let mut weights = Vec::with_capacity(STIELTJES_NODES);
        for i in 0..STIELTJES_NODES {
            let z = -half + (i as f64 + 0.5) * h;
            let u = 1.0 / (1.0 + (-z).exp());
            let t = generator.mahalanobis_quantile(u)?;
            nodes.push(t.ln_1p());
            weights.push(u * (1.0 - u) * h);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);

        let mut a = Vec::with_capacity(degree);
        let mut b = vec![0.0];
        let mut prev = vec![0.0; STIELTJES_NODES];
        let mut cur = vec![1.0; STIELTJES_NODES];
        for j in 0..degree {
            let aj: f64 = (0..STIELTJES_NODES)
                .map(|i| weights[i] * nodes[i] * cur[i] * cur[i])
                .sum();
            let next: Vec<f64> = (0..STIELTJES_NODES)
                .map(|i| (nodes[i] - aj) * cur[i] - b[j] * prev[i])
                .collect();
            let norm = (0..STIELTJES_NODES)
                .map(|i| weights[i] * next[i] * next[i])
                .sum::<f64>()
                .sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Submodel(format!(
                    "orthogonal polynomial recurrence broke down at degree {}",
                    j + 1
                )));
            }
            a.push(aj);
            b.push(norm);
            prev = cur;
            cur = next.into_iter().map(|v| v / norm).collect();
        }
        Ok(Self { a, b })
    }

    pub fn degree(&self) -> usize {
        self.a.len()
    }

    /// `p₁(s)..p_k(s)` into `out` (length `k ≤ degree`).
    pub fn eval(&self, s: f64, out: &mut [f64]) {
        let (mut prev, mut cur) = (0.0, 1.0);
        for (j, slot) in out.iter_mut().enumerate() {
            let next = ((s - self.a[j]) * cur - self.b[j] * prev) / self.b[j + 1];
            *slot = next;
            prev = cur;
            cur = next;
        }
    }
}

/// The `k` tilt directions `b_j(t)` of a submodel.
#[derive(Clone)]
pub enum TiltBasis {
    PolyLogT {
        k: usize,
        poly: Arc<OrthoPolyLog>,
    },
    BSplineQuantile {
        k: usize,
        generator: DensityGenerator,
    },
    Custom(Vec<TiltFn>),
}

impl fmt::Debug for TiltBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TiltBasis::PolyLogT { k, .. } => write!(f, "PolyLogT(k={k})"),
            TiltBasis::BSplineQuantile { k, .. } => write!(f, "BSplineQuantile(k={k})"),
            TiltBasis::Custom(fns) => write!(f, "Custom(k={})", fns.len()),
        }
    }
}

impl TiltBasis {
    pub fn k(&self) -> usize {
        match self {
            TiltBasis::PolyLogT { k, .. } | TiltBasis::BSplineQuantile { k, .. } => *k,
            TiltBasis::Custom(fns) => fns.len(),
        }
    }

    pub fn eval(&self, t: f64, out: &mut [f64]) {
        match self {
            TiltBasis::PolyLogT { k, poly } => poly.eval(t.ln_1p(), &mut out[..*k]),
            TiltBasis::BSplineQuantile { k, generator } => {
                let ku = *k as f64 * generator.radial_cdf(t);
                for (j, slot) in out.iter_mut().enumerate().take(*k) {
                    *slot = (1.0 - (ku - j as f64).abs()).max(0.0);
                }
            }
            TiltBasis::Custom(fns) => {
                for (slot, f) in out.iter_mut().zip(fns) {
                    *slot = f(t);
                }
            }
        }
    }

    pub fn eval_vec(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.k()];
        self.eval(t, &mut out);
        out
    }
}

/// `∫ f_t(t) φ(t) dt` under the radial law of `generator`, in `y = ln t`.
pub fn radial_expectation<F: Fn(f64) -> f64>(generator: &DensityGenerator, phi: F) -> f64 {
    let integrand = |y: f64| {
        let t = y.exp();
        if t <= 0.0 || !t.is_finite() {
            return 0.0;
        }
        let v = (generator.log_radial_density(t) + y).exp() * phi(t);
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    integrate_to_inf(integrand, 0.0, 1e-14, 1e-12)
        + integrate_to_inf(|y| integrand(-y), 0.0, 1e-14, 1e-12)
}

/// A parametric submodel through the base model.
#[derive(Debug, Clone)]
pub struct SubmodelSpec {
    base: ResModel,
    basis: TiltBasis,
    link: TiltLink,
    partition: ParamPartition,
}

impl SubmodelSpec {
    /// Submodel with caller-supplied tilt directions.
    pub fn custom(
        base: ResModel,
        fns: Vec<TiltFn>,
        link: TiltLink,
        partition: ParamPartition,
    ) -> Result<Self> {
        Self::checked(base, TiltBasis::Custom(fns), link, partition)
    }

    fn checked(
        base: ResModel,
        basis: TiltBasis,
        link: TiltLink,
        partition: ParamPartition,
    ) -> Result<Self> {
        if partition.total() != crate::model::packed_len(base.dim()) {
            return Err(Error::Shape(
                "partition does not match the base model".into(),
            ));
        }
        let spec = Self {
            base,
            basis,
            link,
            partition,
        };
        spec.check_normalizable(WORKING_TILT)?;
        Ok(spec)
    }

    pub fn base(&self) -> &ResModel {
        &self.base
    }

    pub fn basis(&self) -> &TiltBasis {
        &self.basis
    }

    pub fn link(&self) -> TiltLink {
        self.link
    }

    pub fn partition(&self) -> &ParamPartition {
        &self.partition
    }

    pub fn k(&self) -> usize {
        self.basis.k()
    }

    /// Submodel nuisance dimension: tilts plus finite nuisance coordinates.
    pub fn r_i(&self) -> usize {
        self.k() + self.partition.r()
    }

    fn ln_tilt(&self, t: f64, eta: &[f64]) -> f64 {
        let b = self.basis.eval_vec(t);
        let x: f64 = b.iter().zip(eta).map(|(b, e)| b * e).sum();
        self.link.ln_c(x)
    }

    /// `A(η) = E₀{c(η·b(t))}`.
    pub fn normalizer(&self, eta: &[f64]) -> Result<f64> {
        if eta.len() != self.k() {
            return Err(Error::Shape(format!(
                "tilt of length {} for k = {}",
                eta.len(),
                self.k()
            )));
        }
        if eta.iter().all(|e| *e == 0.0) {
            return Ok(1.0);
        }
        let gen = self.base.generator();
        if self.link == TiltLink::Exponential {
            // the tail must still decay once the tilt is applied
            let tail: Vec<f64> = [30.0, 40.0, 50.0]
                .iter()
                .map(|y: &f64| gen.log_radial_density(y.exp()) + y + self.ln_tilt(y.exp(), eta))
                .collect();
            if !(tail[2] < tail[1] && tail[1] < tail[0] && tail[2] < -30.0) {
                return Err(Error::Submodel(format!(
                    "tilt {eta:?} makes the radial law non-normalizable"
                )));
            }
        }
        let a = radial_expectation(gen, |t| self.ln_tilt(t, eta).exp());
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::Submodel(format!("tilt {eta:?} has normalizer {a}")));
        }
        Ok(a)
    }

    /// Checks every `±radius` coordinate tilt for normalizability.
    pub fn check_normalizable(&self, radius: f64) -> Result<()> {
        for j in 0..self.k() {
            for sign in [-1.0, 1.0] {
                let mut eta = vec![0.0; self.k()];
                eta[j] = sign * radius;
                self.normalizer(&eta)?;
            }
        }
        Ok(())
    }

    /// Log density of the tilted model at `x`.
    pub fn tilted_logpdf(&self, x: &[f64], eta: &[f64]) -> Result<f64> {
        if x.len() != self.base.dim() {
            return Err(Error::Shape("observation dimension mismatch".into()));
        }
        let a = self.normalizer(eta)?;
        let t = self.base.mahalanobis_slice(x);
        Ok(self.base.logpdf_slice(x) + self.ln_tilt(t, eta) - a.ln())
    }

    /// Log radial density of the tilted model.
    pub fn tilted_log_radial_density(&self, t: f64, eta: &[f64]) -> Result<f64> {
        let a = self.normalizer(eta)?;
        Ok(self.base.generator().log_radial_density(t) + self.ln_tilt(t, eta) - a.ln())
    }

    /// Centered tilt scores `b_j(t_m)` on the batch.
    pub fn tilt_scores(&self, batch: &SampleBatch) -> Result<FunctionSample> {
        batch.ensure_model(&self.base)?;
        let k = self.k();
        let m = batch.len();
        let mut values = DMatrix::zeros(k, m);
        if k > 0 {
            values
                .as_mut_slice()
                .par_chunks_mut(k * SAMPLE_CHUNK)
                .enumerate()
                .for_each(|(c, out)| {
                    for (local, col) in out.chunks_mut(k).enumerate() {
                        let t = self
                            .base
                            .mahalanobis_slice(batch.observation(c * SAMPLE_CHUNK + local));
                        self.basis.eval(t, col);
                    }
                });
        }
        FunctionSample::new(values, batch.fingerprint())
    }
}

/// Submodel of size `k` from a basis family, with that family's link.
pub fn build_submodel(
    base: &ResModel,
    k: usize,
    family: BasisFamily,
    partition: &ParamPartition,
) -> Result<SubmodelSpec> {
    if k == 0 {
        return Err(Error::Submodel(
            "a submodel needs at least one tilt direction".into(),
        ));
    }
    let basis = match family {
        BasisFamily::PolyLogT => TiltBasis::PolyLogT {
            k,
            poly: Arc::new(OrthoPolyLog::new(base.generator(), k)?),
        },
        BasisFamily::BSplineQuantile => TiltBasis::BSplineQuantile {
            k,
            generator: base.generator().clone(),
        },
    };
    SubmodelSpec::checked(
        base.clone(),
        basis,
        family.default_link(),
        partition.clone(),
    )
}

/// Nuisance score of the submodel: tilt rows, then finite nuisance rows.
pub fn nuisance_score_submodel(spec: &SubmodelSpec, batch: &SampleBatch) -> Result<FunctionSample> {
    let scores = score_analytic(&spec.base, batch, &spec.partition)?;
    stack_nuisance(&spec.tilt_scores(batch)?, &scores)
}

fn stack_nuisance(tilt: &FunctionSample, scores: &ScoreSample) -> Result<FunctionSample> {
    FunctionSample::stack(&[tilt, &scores.nuisance()])
}

/// `s̄ = s_γ − Π(s_γ | sieve span)`.
pub fn semipar_efficient_score(
    s_gamma: &FunctionSample,
    sieve_span: &SpanBasis,
) -> Result<EfficientScore> {
    residual_score(s_gamma, sieve_span).map_err(|e| match e {
        Error::SingularSpan { condition, .. } => Error::SingularSpan {
            condition,
            k: Some(sieve_span.k()),
        },
        other => other,
    })
}

/// `Ī = C₀(s̄)`.
pub fn semipar_efficient_fim(s_bar: &FunctionSample) -> DMatrix<f64> {
    cov0(s_bar)
}

/// Checks strict increase and, for spline bases, knot nesting.
pub fn validate_schedule(schedule: &[usize], family: BasisFamily) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::Schedule("schedule is empty".into()));
    }
    for w in schedule.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Schedule(format!(
                "schedule must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if family == BasisFamily::BSplineQuantile && w[0] > 0 && w[1] % w[0] != 0 {
            return Err(Error::Schedule(format!(
                "spline knot grids for k = {} and k = {} are not nested",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct SieveOptions {
    pub rtol: f64,
    pub policy: GramPolicy,
    pub monotone_tol: f64,
}

impl Default for SieveOptions {
    fn default() -> Self {
        Self {
            rtol: DEFAULT_RTOL,
            policy: GramPolicy::default(),
            monotone_tol: MONOTONE_TOL,
        }
    }
}

/// Sieve of bounds along a schedule of nested submodels on one batch.
#[derive(Debug, Clone)]
pub struct SieveTrace {
    pub family: BasisFamily,
    pub link: TiltLink,
    pub k_schedule: Vec<usize>,
    pub scrb_k: Vec<DMatrix<f64>>,
    pub efficient_fim_k: Vec<DMatrix<f64>>,
    /// Relative Frobenius change from the previous step (`None` first).
    pub rel_change: Vec<Option<f64>>,
    pub gram_condition: Vec<f64>,
    pub gram_rank: Vec<usize>,
    pub converged: bool,
    pub final_scrb: DMatrix<f64>,
    /// CRB with the finite nuisance only (generator known).
    pub parametric_crb: DMatrix<f64>,
    pub rtol: f64,
    pub m: usize,
    pub seed: u64,
    pub model_fingerprint: u64,
    pub batch_fingerprint: u64,
    pub partition: ParamPartition,
}

impl SieveTrace {
    pub fn write_csv<W: Write>(&self, mut w: W, meta: &[(&str, String)]) -> Result<()> {
        for (k, v) in meta {
            writeln!(w, "# {k}={v}")?;
        }
        writeln!(w, "# family={}", self.family)?;
        writeln!(w, "# link={}", self.link.as_str())?;
        writeln!(w, "# model_fingerprint={:016x}", self.model_fingerprint)?;
        writeln!(w, "# batch_fingerprint={:016x}", self.batch_fingerprint)?;
        writeln!(w, "# M={}", self.m)?;
        writeln!(w, "# seed={}", self.seed)?;
        writeln!(w, "# rtol={:e}", self.rtol)?;
        writeln!(w, "# converged={}", self.converged)?;
        let q = self.final_scrb.nrows();
        let parametric: Vec<String> = self
            .parametric_crb
            .transpose()
            .iter()
            .map(|v| format!("{v:e}"))
            .collect();
        writeln!(w, "# parametric_crb={}", parametric.join(";"))?;
        let mut header = vec![
            "k".to_string(),
            "rel_change".into(),
            "gram_condition".into(),
            "gram_rank".into(),
        ];
        for i in 0..q {
            for j in 0..q {
                header.push(format!("scrb_{i}_{j}"));
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for (idx, k) in self.k_schedule.iter().enumerate() {
            let mut row = vec![
                k.to_string(),
                self.rel_change[idx]
                    .map(|c| format!("{c:e}"))
                    .unwrap_or_else(|| "NA".into()),
                format!("{:e}", self.gram_condition[idx]),
                self.gram_rank[idx].to_string(),
            ];
            let s = &self.scrb_k[idx];
            for i in 0..q {
                for j in 0..q {
                    row.push(format!("{:e}", s[(i, j)]));
                }
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Samples a batch from `base` and runs the sieve on it.
pub fn scrb(
    base: &ResModel,
    partition: &ParamPartition,
    schedule: &[usize],
    m: usize,
    seed: u64,
    family: BasisFamily,
) -> Result<SieveTrace> {
    validate_schedule(schedule, family)?;
    let batch = sample_res(base, m, seed)?;
    scrb_on_batch(
        base,
        &batch,
        partition,
        schedule,
        family,
        SieveOptions::default(),
    )
}

/// Sieve bounds on a given batch. Fails with `Integrity` if the trace is not
/// Loewner-monotone or does not dominate the parametric bound.
pub fn scrb_on_batch(
    base: &ResModel,
    batch: &SampleBatch,
    partition: &ParamPartition,
    schedule: &[usize],
    family: BasisFamily,
    opts: SieveOptions,
) -> Result<SieveTrace> {
    validate_schedule(schedule, family)?;
    let scores = score_analytic(base, batch, partition)?;
    let parametric = bounds_from_scores(&scores, base.fingerprint(), batch.seed())?;
    let s_gamma = scores.interest();
    let kmax = *schedule.iter().max().unwrap_or(&0);
    let poly = if family == BasisFamily::PolyLogT && kmax > 0 {
        Some(Arc::new(OrthoPolyLog::new(base.generator(), kmax)?))
    } else {
        None
    };

    let mut trace = SieveTrace {
        family,
        link: family.default_link(),
        k_schedule: schedule.to_vec(),
        scrb_k: Vec::new(),
        efficient_fim_k: Vec::new(),
        rel_change: Vec::new(),
        gram_condition: Vec::new(),
        gram_rank: Vec::new(),
        converged: false,
        final_scrb: DMatrix::zeros(0, 0),
        parametric_crb: parametric.crb().clone(),
        rtol: opts.rtol,
        m: batch.len(),
        seed: batch.seed(),
        model_fingerprint: base.fingerprint(),
        batch_fingerprint: batch.fingerprint(),
        partition: partition.clone(),
    };

    for &k in schedule {
        let tilt = if k == 0 {
            FunctionSample::zeros(0, batch.len(), batch.fingerprint())
        } else {
            let basis = match &poly {
                Some(p) => TiltBasis::PolyLogT { k, poly: p.clone() },
                None => TiltBasis::BSplineQuantile {
                    k,
                    generator: base.generator().clone(),
                },
            };
            SubmodelSpec::checked(
                base.clone(),
                basis,
                family.default_link(),
                partition.clone(),
            )?
            .tilt_scores(batch)?
        };
        let nuisance = stack_nuisance(&tilt, &scores)?;
        let span = if nuisance.q() == 0 {
            SpanBasis::empty(batch.len(), batch.fingerprint())
        } else {
            SpanBasis::new(nuisance, opts.policy).map_err(|e| match e {
                Error::SingularSpan { condition, .. } => Error::SingularSpan {
                    condition,
                    k: Some(k),
                },
                other => other,
            })?
        };
        let eff = semipar_efficient_score(&s_gamma, &span)?;
        let bound = invert_efficient(&eff).map_err(|e| match e {
            Error::NonIdentifiable(d) => Error::NonIdentifiable(format!("sieve size {k}: {d}")),
            other => other,
        })?;
        if let Some(prev) = trace.scrb_k.last() {
            let gap = min_eigenvalue(&(&bound - prev));
            if gap < -opts.monotone_tol {
                return Err(Error::Integrity(format!(
                    "sieve trace decreases at k = {k} (min eigenvalue of the increment {gap:e})"
                )));
            }
            trace
                .rel_change
                .push(Some(frobenius(&(&bound - prev)) / frobenius(prev)));
        } else {
            trace.rel_change.push(None);
        }
        trace.gram_condition.push(span.condition_number());
        trace.gram_rank.push(span.gram_rank());
        trace
            .efficient_fim_k
            .push(semipar_efficient_fim(&eff.score));
        trace.scrb_k.push(bound);
    }

    let last = trace.scrb_k.last().cloned().unwrap_or_default();
    let gap = min_eigenvalue(&(&last - &trace.parametric_crb));
    if gap < -opts.monotone_tol {
        return Err(Error::Integrity(format!(
            "sieve bound falls below the parametric bound (min eigenvalue {gap:e})"
        )));
    }
    let n = trace.rel_change.len();
    trace.converged = n >= 3
        && trace.rel_change[n - 2..]
            .iter()
            .all(|c| c.is_some_and(|c| c <= opts.rtol));
    trace.final_scrb = last;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::efficient_fim;
    use crate::model::Interest;
    use crate::numeric::rel_frobenius;
    use crate::quad::integrate;
    use nalgebra::DVector;

    fn gaussian2() -> ResModel {
        ResModel::normalized(
            DVector::from_vec(vec![0.2, -0.1]),
            DMatrix::from_row_slice(2, 2, &[1.3, 0.2, 0.2, 0.7]),
            DensityGenerator::gaussian(2).unwrap(),
            Default::default(),
        )
        .unwrap()
    }

    fn custom(base: &ResModel, fns: Vec<TiltFn>, link: TiltLink) -> SubmodelSpec {
        let p = ParamPartition::for_interest(Interest::Shape, base.dim()).unwrap();
        SubmodelSpec::custom(base.clone(), fns, link, p).unwrap()
    }

    #[test]
    fn logistic_link_has_unit_value_and_slope_at_zero() {
        let l = TiltLink::Logistic;
        assert!(l.ln_c(0.0).abs() < 1e-16);
        let h = 1e-6;
        assert!(((l.ln_c(h) - l.ln_c(-h)) / (2.0 * h) - 1.0).abs() < 1e-9);
        assert!(l.ln_c(50.0) < std::f64::consts::LN_2 + 1e-12);
        assert!(l.ln_c(-800.0).is_finite());
    }

    #[test]
    fn gaussian_linear_tilt_is_rescaled_gaussian() {
        let base = gaussian2();
        let spec = custom(&base, vec![Arc::new(|t| t)], TiltLink::Exponential);
        let eta = 0.15;
        assert!((spec.normalizer(&[eta]).unwrap() - (1.0 - 2.0 * eta).powf(-1.0)).abs() < 1e-9);
        let batch = sample_res(&base, 20, 1).unwrap();
        for m in 0..20 {
            let x = batch.observation(m);
            let t = base.mahalanobis_slice(x);
            let c = 1.0 - 2.0 * eta;
            let expect = -(2.0 * std::f64::consts::PI).ln()
                - 0.5 * (base.log_det() - 2.0 * c.ln())
                - 0.5 * c * t;
            assert!((spec.tilted_logpdf(x, &[eta]).unwrap() - expect).abs() < 1e-9);
        }
        assert!(matches!(spec.normalizer(&[0.6]), Err(Error::Submodel(_))));
    }

    #[test]
    fn zero_tilt_reproduces_base_density() {
        let base = ResModel::standard(DensityGenerator::student_t(4.0, 3).unwrap()).unwrap();
        let p = ParamPartition::for_interest(Interest::Mu, 3).unwrap();
        let batch = sample_res(&base, 100, 2).unwrap();
        for family in [BasisFamily::PolyLogT, BasisFamily::BSplineQuantile] {
            let spec = build_submodel(&base, 4, family, &p).unwrap();
            for m in 0..100 {
                let x = batch.observation(m);
                let d = spec.tilted_logpdf(x, &[0.0; 4]).unwrap() - base.logpdf_slice(x);
                assert!(d.abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn tilted_student_densities_integrate_to_one() {
        let base = ResModel::standard(DensityGenerator::student_t(3.0, 1).unwrap()).unwrap();
        let p = ParamPartition::for_interest(Interest::Mu, 1).unwrap();
        let spec = build_submodel(&base, 3, BasisFamily::PolyLogT, &p).unwrap();
        for eta in [
            [0.05, 0.0, 0.0],
            [0.0, -0.05, 0.0],
            [0.03, 0.02, -0.04],
            [0.5, -0.4, 0.3],
        ] {
            // integrate over x on the line, independent of the radial form
            let f = |x: f64| spec.tilted_logpdf(&[x], &eta).unwrap().exp();
            let mass = integrate(f, -1.0, 1.0, 1e-12, 1e-10)
                + crate::quad::integrate_to_inf(f, 1.0, 1e-12, 1e-10)
                + crate::quad::integrate_to_inf(|x| f(-x), 1.0, 1e-12, 1e-10);
            assert!((mass - 1.0).abs() < 1e-6, "mass {mass} at {eta:?}");
        }
    }

    #[test]
    fn polylog_basis_is_orthonormal_under_the_radial_law() {
        let gen = DensityGenerator::generalized_gaussian(0.5, 2).unwrap();
        let poly = OrthoPolyLog::new(&gen, 5).unwrap();
        let mut gram = DMatrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                gram[(i, j)] = radial_expectation(&gen, |t| {
                    let mut v = [0.0; 5];
                    poly.eval(t.ln_1p(), &mut v);
                    let all = [1.0, v[0], v[1], v[2], v[3], v[4]];
                    all[i] * all[j]
                });
            }
        }
        assert!((gram - DMatrix::<f64>::identity(6, 6)).amax() < 1e-6);
    }

    #[test]
    fn constant_tilt_gives_zero_score() {
        let base = gaussian2();
        let spec = custom(&base, vec![Arc::new(|_| 3.0)], TiltLink::Exponential);
        let batch = sample_res(&base, 1000, 3).unwrap();
        let s = spec.tilt_scores(&batch).unwrap();
        assert!(s.values().amax() < 1e-12);
    }

    #[test]
    fn linear_tilt_score_is_centered_chi_square() {
        let base = gaussian2();
        let spec = custom(&base, vec![Arc::new(|t| t)], TiltLink::Exponential);
        let batch = sample_res(&base, 100_000, 4).unwrap();
        let s = nuisance_score_submodel(&spec, &batch).unwrap();
        assert_eq!(s.q(), spec.r_i());
        assert_eq!(spec.r_i(), 1 + 2);
        let t = batch.mahalanobis(&base);
        let mean_t: f64 = t.iter().sum::<f64>() / t.len() as f64;
        assert!((mean_t - 2.0).abs() < 4.0 * 2.0 / (1e5f64).sqrt());
        for (m, tm) in t.iter().take(100).enumerate() {
            assert!((s.values()[(0, m)] - (tm - mean_t)).abs() < 1e-10);
        }
        assert!(crate::numeric::row_means(s.values()).amax() < 1e-12);
    }

    #[test]
    fn empty_sieve_and_finite_span_identities() {
        let base = gaussian2();
        let batch = sample_res(&base, 20_000, 5).unwrap();
        let p = ParamPartition::for_interest(Interest::Shape, 2).unwrap();
        let scores = score_analytic(&base, &batch, &p).unwrap();
        let s_gamma = scores.interest();

        let empty = SpanBasis::empty(batch.len(), batch.fingerprint());
        let eff = semipar_efficient_score(&s_gamma, &empty).unwrap();
        assert!((semipar_efficient_fim(&eff.score) - cov0(&s_gamma)).amax() < 1e-15);

        let finite = SpanBasis::new(scores.nuisance(), GramPolicy::default()).unwrap();
        let eff = semipar_efficient_score(&s_gamma, &finite).unwrap();
        let a = semipar_efficient_fim(&eff.score);
        assert!(rel_frobenius(&a, &efficient_fim(&scores).unwrap()) < 1e-10);
        assert!(min_eigenvalue(&(cov0(&s_gamma) - &a)) > -1e-12);

        let trace = scrb_on_batch(
            &base,
            &batch,
            &p,
            &[0],
            BasisFamily::PolyLogT,
            SieveOptions::default(),
        )
        .unwrap();
        let crb = crate::fisher::compute_bounds(&base, &batch, &p).unwrap();
        assert!(rel_frobenius(&trace.final_scrb, crb.crb()) < 1e-10);
    }

    #[test]
    fn sieve_traces_are_monotone_and_dominate() {
        let base = gaussian2();
        let batch = sample_res(&base, 20_000, 6).unwrap();
        let p = ParamPartition::for_interest(Interest::MuShape, 2).unwrap();
        for family in [BasisFamily::PolyLogT, BasisFamily::BSplineQuantile] {
            let tr = scrb_on_batch(
                &base,
                &batch,
                &p,
                &[2, 4, 8, 16],
                family,
                SieveOptions::default(),
            )
            .unwrap();
            assert_eq!(tr.scrb_k.len(), 4);
            for w in tr.scrb_k.windows(2) {
                assert!(min_eigenvalue(&(&w[1] - &w[0])) >= -1e-9);
            }
            for s in &tr.scrb_k {
                assert!(min_eigenvalue(&(&tr.final_scrb - s)) >= -1e-9);
                assert!(min_eigenvalue(&(s - &tr.parametric_crb)) >= -1e-9);
            }
            let mut out = Vec::new();
            tr.write_csv(&mut out, &[]).unwrap();
            let text = String::from_utf8(out).unwrap();
            assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 5);
        }
    }

    #[test]
    fn confounded_direction_is_removed() {
        let base = gaussian2();
        let batch = sample_res(&base, 5000, 7).unwrap();
        let p = ParamPartition::for_interest(Interest::Shape, 2).unwrap();
        let scores = score_analytic(&base, &batch, &p).unwrap();
        let s_gamma = scores.interest();
        let span = SpanBasis::new(
            FunctionSample::stack(&[&s_gamma.rows(&[0]), &scores.nuisance()]).unwrap(),
            GramPolicy::default(),
        )
        .unwrap();
        let eff = semipar_efficient_score(&s_gamma, &span).unwrap();
        assert!(eff.degenerate);
        assert!(cov0(&eff.score)[(0, 0)] < 1e-20);
    }

    #[test]
    fn schedule_validation() {
        assert!(validate_schedule(&[2, 4, 8], BasisFamily::BSplineQuantile).is_ok());
        assert!(matches!(
            validate_schedule(&[2, 3], BasisFamily::BSplineQuantile),
            Err(Error::Schedule(_))
        ));
        assert!(validate_schedule(&[2, 3], BasisFamily::PolyLogT).is_ok());
        assert!(matches!(
            validate_schedule(&[4, 2], BasisFamily::PolyLogT),
            Err(Error::Schedule(_))
        ));
        assert!(matches!(
            validate_schedule(&[], BasisFamily::PolyLogT),
            Err(Error::Schedule(_))
        ));
        let base = gaussian2();
        let p = ParamPartition::for_interest(Interest::Mu, 2).unwrap();
        assert!(matches!(
            scrb(&base, &p, &[3, 3], 100, 0, BasisFamily::PolyLogT),
            Err(Error::Schedule(_))
        ));
        assert!(matches!(
            build_submodel(&base, 0, BasisFamily::PolyLogT, &p),
            Err(Error::Submodel(_))
        ));
    }
}
