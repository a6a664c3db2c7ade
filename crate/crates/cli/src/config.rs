//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comment
//! dimension  = 2
//! mu         = 0, 0                  # default zeros
//! sigma      = 2, 0.5; 0.5, 1        # rows separated by ';', default identity
//! generator  = student_t             # gaussian | student_t | generalized_gaussian
//! shape_param = 4                    # ν for student_t, s for generalized_gaussian
//! constraint = trace                 # trace | det
//! interest   = mu                    # mu | shape | mu+shape
//! seed       = 42                    # required
//! M          = 100000                # batch size (per-trial size for bench)
//! R          = 1000                  # bench trials
//! bound_M    = 100000                # batch size of the bounds used by bench
//! schedule   = 2, 4, 8, 16
//! family     = polylogt              # polylogt | bspline_quantile
//! rtol       = 1e-3
//! estimators = sample_mean, tyler, huber:0.9, student_t:3
//! tol        = 1e-9
//! max_iter   = 500
//! require_moment = 4                 # refuse generators without this radial moment
//! ```
//!
//! Σ is rescaled onto the constraint when loaded.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use scrb_core::estimators::{EstimatorId, FixedPoint};
use scrb_core::model::{
    Constraint, DensityGenerator, GeneratorKind, Interest, ParamPartition, ResModel,
};
use scrb_core::semiparam::{validate_schedule, BasisFamily, DEFAULT_RTOL};
use scrb_core::{Error, Result};

const KEYS: &[&str] = &[
    "dimension",
    "mu",
    "sigma",
    "generator",
    "shape_param",
    "constraint",
    "interest",
    "seed",
    "M",
    "R",
    "bound_M",
    "schedule",
    "family",
    "rtol",
    "estimators",
    "tol",
    "max_iter",
    "require_moment",
];

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ResModel,
    pub interest: Interest,
    pub seed: u64,
    pub m: usize,
    pub r: usize,
    pub bound_m: usize,
    pub schedule: Vec<usize>,
    pub family: BasisFamily,
    pub rtol: f64,
    pub estimators: Vec<EstimatorId>,
    pub fixed_point: FixedPoint,
    pub require_moment: Option<f64>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn number<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| bad(format!("`{key}` expects a number, got `{v}`")))
}

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| number(key, s))
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected `key = value`", lineno + 1)))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(bad(format!("line {}: unknown key `{k}`", lineno + 1)));
            }
            if kv.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(bad(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
        }
        let get = |k: &str| kv.get(k).map(String::as_str);

        let n: usize = number(
            "dimension",
            get("dimension").ok_or_else(|| bad("missing `dimension`"))?,
        )?;
        if n == 0 {
            return Err(bad("`dimension` must be at least 1"));
        }
        let seed: u64 = number("seed", get("seed").ok_or_else(|| bad("missing `seed`"))?)?;

        let mu = match get("mu") {
            Some(v) => {
                let vals = list("mu", v)?;
                if vals.len() != n {
                    return Err(bad(format!(
                        "`mu` has {} entries, expected {n}",
                        vals.len()
                    )));
                }
                DVector::from_vec(vals)
            }
            None => DVector::zeros(n),
        };
        let sigma = match get("sigma") {
            Some(v) => {
                let rows: Vec<Vec<f64>> = v
                    .split(';')
                    .map(|r| list("sigma", r))
                    .collect::<Result<_>>()?;
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(bad(format!("`sigma` must be {n}x{n}")));
                }
                DMatrix::from_fn(n, n, |i, j| rows[i][j])
            }
            None => DMatrix::identity(n, n),
        };
        if (&sigma - sigma.transpose()).amax() > 1e-12 * sigma.amax() {
            return Err(bad("`sigma` is not symmetric"));
        }

        let shape_param = get("shape_param")
            .map(|v| number::<f64>("shape_param", v))
            .transpose()?;
        let kind = match get("generator").unwrap_or("gaussian") {
            "gaussian" => GeneratorKind::Gaussian,
            "student_t" | "t" => GeneratorKind::StudentT {
                nu: shape_param
                    .ok_or_else(|| bad("student_t needs `shape_param` (degrees of freedom)"))?,
            },
            "generalized_gaussian" | "gg" => GeneratorKind::GeneralizedGaussian {
                s: shape_param.ok_or_else(|| bad("generalized_gaussian needs `shape_param`"))?,
            },
            other => return Err(bad(format!("unknown generator `{other}`"))),
        };
        let require_moment = get("require_moment")
            .map(|v| number::<f64>("require_moment", v))
            .transpose()?;
        let generator = DensityGenerator::new(kind, n)?;
        if let Some(k) = require_moment {
            if !generator.radial_moment_exists(k) {
                return Err(Error::Moment {
                    order: k,
                    detail: format!("{} has no radial moment of order {k}", kind),
                });
            }
        }
        let constraint = match get("constraint") {
            Some(v) => {
                Constraint::parse(v).ok_or_else(|| bad(format!("unknown constraint `{v}`")))?
            }
            None => Constraint::TraceN,
        };
        let model = ResModel::normalized(mu, sigma, generator, constraint)?;

        let interest = match get("interest") {
            Some(v) => Interest::parse(v).ok_or_else(|| bad(format!("unknown interest `{v}`")))?,
            None => Interest::Mu,
        };
        ParamPartition::for_interest(interest, n)?;

        let family = match get("family") {
            Some(v) => {
                BasisFamily::parse(v).ok_or_else(|| bad(format!("unknown basis family `{v}`")))?
            }
            None => BasisFamily::PolyLogT,
        };
        let schedule: Vec<usize> = match get("schedule") {
            Some(v) => v
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| number("schedule", s))
                .collect::<Result<_>>()?,
            None => vec![2, 4, 8, 16],
        };
        validate_schedule(&schedule, family)?;

        let estimators = match get("estimators") {
            Some(v) => v
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    EstimatorId::parse(s)
                        .ok_or_else(|| bad(format!("unknown estimator `{}`", s.trim())))
                })
                .collect::<Result<_>>()?,
            None => vec![EstimatorId::SampleMoments, EstimatorId::Tyler],
        };

        let defaults = FixedPoint::default();
        let cfg = Self {
            model,
            interest,
            seed,
            m: get("M")
                .map(|v| number("M", v))
                .transpose()?
                .unwrap_or(10_000),
            r: get("R").map(|v| number("R", v)).transpose()?.unwrap_or(100),
            bound_m: get("bound_M")
                .map(|v| number("bound_M", v))
                .transpose()?
                .unwrap_or(100_000),
            schedule,
            family,
            rtol: get("rtol")
                .map(|v| number("rtol", v))
                .transpose()?
                .unwrap_or(DEFAULT_RTOL),
            estimators,
            fixed_point: FixedPoint {
                tol: get("tol")
                    .map(|v| number("tol", v))
                    .transpose()?
                    .unwrap_or(defaults.tol),
                max_iter: get("max_iter")
                    .map(|v| number("max_iter", v))
                    .transpose()?
                    .unwrap_or(defaults.max_iter),
            },
            require_moment,
        };
        if cfg.m < 2 || cfg.bound_m < 2 {
            return Err(bad("`M` and `bound_M` must be at least 2"));
        }
        if cfg.r < 2 {
            return Err(bad("`R` must be at least 2"));
        }
        if !(cfg.rtol > 0.0) {
            return Err(bad("`rtol` must be positive"));
        }
        Ok(cfg)
    }

    pub fn partition(&self) -> ParamPartition {
        ParamPartition::for_interest(self.interest, self.model.dim()).expect("validated on load")
    }

    /// Deterministic rendering of the resolved configuration.
    pub fn canonical(&self) -> String {
        let m = &self.model;
        let join = |v: Vec<String>| v.join(",");
        let mut out = String::new();
        let kind = m.generator().kind();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        line("dimension", m.dim().to_string());
        line(
            "mu",
            join(m.mu().iter().map(|v| format!("{v:e}")).collect()),
        );
        line(
            "sigma",
            (0..m.dim())
                .map(|i| {
                    join(
                        (0..m.dim())
                            .map(|j| format!("{:e}", m.sigma()[(i, j)]))
                            .collect(),
                    )
                })
                .collect::<Vec<_>>()
                .join(";"),
        );
        line("generator", kind.name().to_string());
        line(
            "shape_param",
            kind.shape_param()
                .map(|p| format!("{p:e}"))
                .unwrap_or_default(),
        );
        line("constraint", m.constraint().as_str().to_string());
        line("interest", self.interest.as_str().to_string());
        line("seed", self.seed.to_string());
        line("M", self.m.to_string());
        line("R", self.r.to_string());
        line("bound_M", self.bound_m.to_string());
        line(
            "schedule",
            join(self.schedule.iter().map(|k| k.to_string()).collect()),
        );
        line("family", self.family.as_str().to_string());
        line("rtol", format!("{:e}", self.rtol));
        line(
            "estimators",
            join(self.estimators.iter().map(|e| e.to_string()).collect()),
        );
        line("tol", format!("{:e}", self.fixed_point.tol));
        line("max_iter", self.fixed_point.max_iter.to_string());
        line(
            "require_moment",
            self.require_moment
                .map(|k| format!("{k:e}"))
                .unwrap_or_default(),
        );
        out
    }

    pub fn hash(&self) -> u64 {
        scrb_core::seed::fingerprint(self.canonical().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = "dimension = 2\nseed = 7\nsigma = 2, 0.5; 0.5, 1\n";

    #[test]
    fn defaults_and_normalization() {
        let c = ExperimentConfig::parse(BASIC).unwrap();
        assert!((c.model.sigma().trace() - 2.0).abs() < 1e-12);
        assert_eq!(c.interest, Interest::Mu);
        assert_eq!(c.schedule, vec![2, 4, 8, 16]);
        assert_eq!(
            c.hash(),
            ExperimentConfig::parse(&format!("# header\n{BASIC}"))
                .unwrap()
                .hash()
        );
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "dimension = 2\n",
            "seed = 1\n",
            "dimension = 2\nseed = 1\nwhat = 3\n",
            "dimension = 2\nseed = 1\nmu = 1\n",
            "dimension = 2\nseed = 1\nsigma = 1, 2; 0, 1\n",
            "dimension = 2\nseed = 1\ngenerator = cauchy\n",
            "dimension = 2\nseed = 1\nschedule = 4, 2\n",
            "dimension = 2\nseed = 1\nfamily = bspline\nschedule = 2, 3\n",
            "dimension = 2\nseed = 1\nestimators = magic\n",
            "dimension = 2\nseed = 1\nseed = 2\n",
            "dimension = 2\nseed = 1\nR = 1\n",
        ] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn moment_requirement_is_enforced() {
        let heavy = "dimension = 2\nseed = 1\ngenerator = student_t\nshape_param = 1.5\nrequire_moment = 2\n";
        assert!(matches!(
            ExperimentConfig::parse(heavy),
            Err(Error::Moment { .. })
        ));
        let t3 =
            "dimension = 2\nseed = 1\ngenerator = student_t\nshape_param = 3\nrequire_moment = 4\n";
        assert!(matches!(
            ExperimentConfig::parse(t3),
            Err(Error::Moment { .. })
        ));
        let ok =
            "dimension = 2\nseed = 1\ngenerator = student_t\nshape_param = 5\nrequire_moment = 4\n";
        assert!(ExperimentConfig::parse(ok).is_ok());
    }
}
