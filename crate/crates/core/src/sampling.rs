//! Seeded i.i.d. sampling from RES models via `x = μ + R · L · u`.
//!
//! Rows are produced in chunks of [`SAMPLE_CHUNK`]; chunk `c` draws from the
//! ChaCha8 stream `c` of the batch seed, so a batch is a pure function of
//! `(model, M, seed)` whatever the rayon thread count.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ResModel;
use crate::numeric::compensated_sum;
use crate::seed::fingerprint;

pub const SAMPLE_CHUNK: usize = 1024;

/// `M` i.i.d. draws; column `m` of [`SampleBatch::points`] is observation `m`.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    points: DMatrix<f64>,
    model_fingerprint: u64,
    seed: u64,
    fingerprint: u64,
}

fn batch_fingerprint(model_fingerprint: u64, seed: u64, m: usize) -> u64 {
    let mut bytes = Vec::with_capacity(32);
    bytes.extend_from_slice(b"batch/v1");
    bytes.extend_from_slice(&model_fingerprint.to_le_bytes());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(&(m as u64).to_le_bytes());
    fingerprint(&bytes)
}

impl SampleBatch {
    /// Wraps externally produced observations (`N × M`, one column per draw).
    pub fn from_points(points: DMatrix<f64>, model_fingerprint: u64, seed: u64) -> Result<Self> {
        if points.ncols() == 0 || points.nrows() == 0 {
            return Err(Error::Shape("batch needs at least one observation".into()));
        }
        if let Some(m) =
            (0..points.ncols()).find(|&m| !points.column(m).iter().all(|v| v.is_finite()))
        {
            return Err(Error::Sampling(format!("observation {m} is not finite")));
        }
        let fingerprint = batch_fingerprint(model_fingerprint, seed, points.ncols());
        Ok(Self {
            points,
            model_fingerprint,
            seed,
            fingerprint,
        })
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    /// Observations as an `M × N` matrix.
    pub fn data(&self) -> DMatrix<f64> {
        self.points.transpose()
    }

    pub fn observation(&self, m: usize) -> &[f64] {
        let n = self.dim();
        &self.points.as_slice()[m * n..(m + 1) * n]
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn model_fingerprint(&self) -> u64 {
        self.model_fingerprint
    }

    /// Identity of the batch used to tie function samples together.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn ensure_model(&self, model: &ResModel) -> Result<()> {
        if self.model_fingerprint != model.fingerprint() || self.dim() != model.dim() {
            return Err(Error::BatchMismatch {
                left: self.model_fingerprint,
                right: model.fingerprint(),
            });
        }
        Ok(())
    }

    /// Squared Mahalanobis distances of every observation under `model`.
    pub fn mahalanobis(&self, model: &ResModel) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|m| model.mahalanobis_slice(self.observation(m)))
            .collect()
    }

    /// Writes the batch as CSV: `#` metadata lines, a header row, one row per draw.
    pub fn write_csv<W: Write>(&self, mut w: W, meta: &[(&str, String)]) -> Result<()> {
        writeln!(w, "# scrb sample batch")?;
        for (k, v) in meta {
            writeln!(w, "# {k}: {v}")?;
        }
        writeln!(w, "# N: {}", self.dim())?;
        writeln!(w, "# M: {}", self.len())?;
        writeln!(w, "# seed: {}", self.seed)?;
        writeln!(w, "# model_fingerprint: {:016x}", self.model_fingerprint)?;
        writeln!(w, "# batch_fingerprint: {:016x}", self.fingerprint)?;
        let header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for m in 0..self.len() {
            let row: Vec<String> = self
                .observation(m)
                .iter()
                .map(|v| format!("{v:e}"))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads a batch written by [`SampleBatch::write_csv`] (or any CSV with the
    /// same `N`, `seed` and `model_fingerprint` metadata).
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut n: Option<usize> = None;
        let mut seed = 0u64;
        let mut model_fp: Option<u64> = None;
        let mut header_seen = false;
        let mut values = Vec::new();
        let mut rows = 0usize;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once(':') {
                    let v = v.trim();
                    match k.trim() {
                        "N" => n = v.parse().ok(),
                        "seed" => seed = v.parse().unwrap_or(0),
                        "model_fingerprint" => model_fp = u64::from_str_radix(v, 16).ok(),
                        _ => {}
                    }
                }
                continue;
            }
            if !header_seen {
                header_seen = true;
                let cols = line.split(',').count();
                match n {
                    Some(n) if n != cols => {
                        return Err(Error::Format(format!(
                            "header has {cols} columns, metadata says N = {n}"
                        )))
                    }
                    _ => n = Some(cols),
                }
                continue;
            }
            let dim = n.expect("set by header");
            let before = values.len();
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Format(format!("line {}: cannot parse '{field}'", lineno + 1))
                })?;
                values.push(v);
            }
            if values.len() - before != dim {
                return Err(Error::Format(format!(
                    "line {}: expected {dim} values",
                    lineno + 1
                )));
            }
            rows += 1;
        }
        let dim = n.ok_or_else(|| Error::Format("missing header".into()))?;
        let points = DMatrix::from_vec(dim, rows, values);
        Self::from_points(points, model_fp.unwrap_or(0), seed)
    }
}

/// Uniform draw on the open interval (0, 1).
#[inline]
fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    ((rng.random::<u64>() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn sample_chunk(
    model: &ResModel,
    l: &DMatrix<f64>,
    seed: u64,
    chunk: usize,
    rows: usize,
) -> Result<Vec<f64>> {
    let n = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    let mut out = Vec::with_capacity(rows * n);
    let mut dir = vec![0.0; n];
    for _ in 0..rows {
        let norm = loop {
            for d in dir.iter_mut() {
                *d = rng.sample(StandardNormal);
            }
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            if norm > 0.0 {
                break norm;
            }
        };
        let t = model
            .generator()
            .mahalanobis_quantile(open_unit(&mut rng))?;
        let radius = t.sqrt() / norm;
        for i in 0..n {
            let mut v = 0.0;
            for k in 0..=i {
                v += l[(i, k)] * dir[k];
            }
            out.push(model.mu()[i] + radius * v);
        }
    }
    Ok(out)
}

/// Draws `m` i.i.d. observations from `model`.
pub fn sample_res(model: &ResModel, m: usize, seed: u64) -> Result<SampleBatch> {
    if m == 0 {
        return Err(Error::Sampling("sample size must be at least 1".into()));
    }
    let l = model.chol_l();
    let chunks: Vec<Vec<f64>> = (0..m.div_ceil(SAMPLE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let rows = SAMPLE_CHUNK.min(m - c * SAMPLE_CHUNK);
            sample_chunk(model, &l, seed, c, rows)
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = chunks.into_iter().flatten().collect();
    let points = DMatrix::from_vec(model.dim(), m, values);
    SampleBatch::from_points(points, model.fingerprint(), seed)
}

/// Monte Carlo estimate of `E[R^k]` with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialMoment {
    pub order: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

pub fn radial_moment(model: &ResModel, k: f64, m: usize, seed: u64) -> Result<RadialMoment> {
    if !model.generator().radial_moment_exists(k) {
        return Err(Error::Moment {
            order: k,
            detail: format!(
                "E[R^{k}] is infinite for the {} generator",
                model.generator().kind()
            ),
        });
    }
    let batch = sample_res(model, m, seed)?;
    let powers: Vec<f64> = batch
        .mahalanobis(model)
        .into_iter()
        .map(|t| t.powf(0.5 * k))
        .collect();
    let mean = compensated_sum(powers.iter().copied()) / m as f64;
    let var = if m > 1 {
        compensated_sum(powers.iter().map(|p| (p - mean) * (p - mean))) / (m - 1) as f64
    } else {
        f64::NAN
    };
    Ok(RadialMoment {
        order: k,
        estimate: mean,
        std_error: (var / m as f64).sqrt(),
        samples: m,
    })
}

/// Kolmogorov–Smirnov distance between a sample and a continuous CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.627_624 / (n as f64).sqrt()
}

/// Sample mean and covariance (divisor `M`) of the batch.
pub fn empirical_moments(batch: &SampleBatch) -> (DVector<f64>, DMatrix<f64>) {
    let mean = crate::numeric::row_means(batch.points());
    let mut centered = batch.points().clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    (mean, crate::numeric::gram_sym(&centered))
}
