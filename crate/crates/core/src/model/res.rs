use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::generator::DensityGenerator;
use super::params::{pack, unpack_params};
use crate::error::{Error, Result};
use crate::seed::fingerprint;

/// Scale normalization that makes (Σ, g) identifiable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Constraint {
    /// `tr Σ = N`.
    #[default]
    TraceN,
    /// `det Σ = 1`.
    Det1,
}

impl Constraint {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "trace" | "trace_n" | "tracen" => Some(Constraint::TraceN),
            "det" | "det1" => Some(Constraint::Det1),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Constraint::TraceN => "trace",
            Constraint::Det1 => "det",
        }
    }

    /// Rescales an SPD matrix onto the constraint surface.
    pub fn normalize(&self, sigma: &DMatrix<f64>) -> DMatrix<f64> {
        let n = sigma.nrows() as f64;
        match self {
            Constraint::TraceN => sigma * (n / sigma.trace()),
            Constraint::Det1 => sigma / sigma.determinant().powf(1.0 / n),
        }
    }

    /// Gradient of the constraint function with respect to Σ (up to scale).
    pub fn normal(&self, sigma_inv: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Constraint::TraceN => DMatrix::identity(sigma_inv.nrows(), sigma_inv.nrows()),
            Constraint::Det1 => sigma_inv.clone(),
        }
    }

    fn residual(&self, sigma: &DMatrix<f64>) -> f64 {
        let n = sigma.nrows() as f64;
        match self {
            Constraint::TraceN => (sigma.trace() - n).abs() / n,
            Constraint::Det1 => (sigma.determinant() - 1.0).abs(),
        }
    }
}

/// One point `(μ, Σ, g)` of the RES semiparametric model.
#[derive(Debug, Clone)]
pub struct ResModel {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    generator: DensityGenerator,
    constraint: Constraint,
    chol: Cholesky<f64, Dyn>,
    sigma_inv: DMatrix<f64>,
    log_det: f64,
    fingerprint: u64,
}

impl ResModel {
    /// Builds a model whose scatter already satisfies `constraint` (relative 1e-10).
    pub fn new(
        mu: DVector<f64>,
        sigma: DMatrix<f64>,
        generator: DensityGenerator,
        constraint: Constraint,
    ) -> Result<Self> {
        let n = mu.len();
        if n == 0 {
            return Err(Error::Model("dimension must be at least 1".into()));
        }
        if sigma.shape() != (n, n) {
            return Err(Error::Shape(format!(
                "scatter is {}x{}, expected {n}x{n}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if generator.dim() != n {
            return Err(Error::Shape(format!(
                "generator normalized for dimension {}, model has {n}",
                generator.dim()
            )));
        }
        if !mu.iter().chain(sigma.iter()).all(|v| v.is_finite()) {
            return Err(Error::Model("non-finite location or scatter".into()));
        }
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > 1e-12 * sigma.amax().max(1.0) {
            return Err(Error::Model(format!(
                "scatter is not symmetric (max gap {asym:e})"
            )));
        }
        if sigma.clone().cholesky().is_none() {
            return Err(Error::Model("scatter is not positive definite".into()));
        }
        let residual = constraint.residual(&sigma);
        if residual > 1e-10 {
            return Err(Error::Model(format!(
                "scatter violates the {} constraint (residual {residual:e})",
                constraint.as_str()
            )));
        }
        // Canonical form: the eliminated coordinate is recomputed from the others.
        let (_, sigma) = unpack_params(&pack(&mu, &sigma), n, constraint)?;
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Model("scatter is not positive definite".into()))?;
        let sigma_inv = chol.inverse();
        let log_det = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let fingerprint = model_fingerprint(&mu, &sigma, &generator, constraint);
        Ok(Self {
            mu,
            sigma,
            generator,
            constraint,
            chol,
            sigma_inv,
            log_det,
            fingerprint,
        })
    }

    /// Like [`ResModel::new`] but first rescales Σ onto the constraint surface.
    pub fn normalized(
        mu: DVector<f64>,
        sigma: DMatrix<f64>,
        generator: DensityGenerator,
        constraint: Constraint,
    ) -> Result<Self> {
        if sigma.nrows() != sigma.ncols() || sigma.clone().cholesky().is_none() {
            return Err(Error::Model(
                "scatter is not square positive definite".into(),
            ));
        }
        let sym = (&sigma + sigma.transpose()) * 0.5;
        Self::new(mu, constraint.normalize(&sym), generator, constraint)
    }

    /// Standard model `μ = 0`, `Σ = I` for the given generator.
    pub fn standard(generator: DensityGenerator) -> Result<Self> {
        let n = generator.dim();
        Self::new(
            DVector::zeros(n),
            DMatrix::identity(n, n),
            generator,
            Constraint::TraceN,
        )
    }

    /// Same generator and constraint, new location and scatter.
    pub fn with_params(&self, mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        Self::new(mu, sigma, self.generator.clone(), self.constraint)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn sigma_inv(&self) -> &DMatrix<f64> {
        &self.sigma_inv
    }

    /// Lower Cholesky factor `L` with `Σ = L Lᵀ`.
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn generator(&self) -> &DensityGenerator {
        &self.generator
    }

    pub fn constraint(&self) -> Constraint {
        self.constraint
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// `(x−μ)ᵀ Σ⁻¹ (x−μ)` for a slice of length N; no shape checks.
    pub fn mahalanobis_slice(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let l = self.chol.l_dirty();
        // forward substitution on L z = x − μ
        let mut z = [0.0f64; 16];
        let mut heap;
        let z: &mut [f64] = if n <= 16 {
            &mut z[..n]
        } else {
            heap = vec![0.0; n];
            &mut heap
        };
        let mut t = 0.0;
        for i in 0..n {
            let mut v = x[i] - self.mu[i];
            for k in 0..i {
                v -= l[(i, k)] * z[k];
            }
            z[i] = v / l[(i, i)];
            t += z[i] * z[i];
        }
        t
    }

    pub fn logpdf_slice(&self, x: &[f64]) -> f64 {
        -0.5 * self.log_det + self.generator.logg(self.mahalanobis_slice(x))
    }
}

fn model_fingerprint(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    generator: &DensityGenerator,
    constraint: Constraint,
) -> u64 {
    let mut bytes = Vec::with_capacity(16 + 8 * (mu.len() + sigma.len()));
    bytes.extend_from_slice(b"res-model/v1");
    bytes.extend_from_slice(&(mu.len() as u64).to_le_bytes());
    for v in mu.iter() {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    for i in 0..sigma.nrows() {
        for j in 0..sigma.ncols() {
            bytes.extend_from_slice(&sigma[(i, j)].to_bits().to_le_bytes());
        }
    }
    bytes.extend_from_slice(generator.kind().name().as_bytes());
    let p = generator.kind().shape_param().unwrap_or(0.0);
    bytes.extend_from_slice(&p.to_bits().to_le_bytes());
    bytes.extend_from_slice(constraint.as_str().as_bytes());
    fingerprint(&bytes)
}

/// Log density of the RES model at `x`.
pub fn res_logpdf(x: &DVector<f64>, model: &ResModel) -> Result<f64> {
    if x.len() != model.dim() {
        return Err(Error::Shape(format!(
            "point has dimension {}, model {}",
            x.len(),
            model.dim()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Model("non-finite observation".into()));
    }
    Ok(model.logpdf_slice(x.as_slice()))
}

/// Squared Mahalanobis distance `(x−μ)ᵀ Σ⁻¹ (x−μ)`.
pub fn mahalanobis(x: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let n = x.len();
    if mu.len() != n || sigma.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "x: {n}, mu: {}, sigma: {}x{}",
            mu.len(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Model("scatter is not positive definite".into()))?;
    let d = x - mu;
    let z = chol
        .l()
        .solve_lower_triangular(&d)
        .expect("cholesky factor is invertible");
    Ok(z.norm_squared().max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generator::GeneratorKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.3
    }

    fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        a.qr().q()
    }

    #[test]
    fn standard_normal_at_mode() {
        let m = ResModel::standard(DensityGenerator::gaussian(1).unwrap()).unwrap();
        let v = res_logpdf(&DVector::from_vec(vec![0.0]), &m).unwrap();
        assert!((v - (-0.5 * (2.0 * PI).ln())).abs() < 1e-15);
        assert!((v + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn isotropic_gaussian_2d() {
        let m = ResModel::standard(DensityGenerator::gaussian(2).unwrap()).unwrap();
        let v = res_logpdf(&DVector::from_vec(vec![1.0, 1.0]), &m).unwrap();
        assert!((v + ((2.0 * PI).ln() + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn student_t_2d_matches_closed_form_and_normalizes() {
        let g = DensityGenerator::student_t(3.0, 2).unwrap();
        let m = ResModel::standard(g.clone()).unwrap();
        let v = res_logpdf(&DVector::from_vec(vec![1.0, 1.0]), &m).unwrap();
        // bivariate t_3: Γ(5/2)/(Γ(3/2)·3π) · (1 + 2/3)^{-5/2}
        let expected = (1.5 / (3.0 * PI)).ln() - 2.5 * (1.0 + 2.0 / 3.0f64).ln();
        assert!((v - expected).abs() < 1e-13);
        // radial quadrature of the 2-D density: ∫ 2π r h(r²) dr
        let mass = crate::quad::integrate_to_inf(
            |r| 2.0 * PI * r * g.logg(r * r).exp(),
            0.0,
            1e-12,
            1e-12,
        );
        assert!((mass - 1.0).abs() < 1e-8);
    }

    #[test]
    fn mahalanobis_examples() {
        let mu = DVector::from_vec(vec![1.0, 2.0]);
        let eye = DMatrix::identity(2, 2);
        assert_eq!(mahalanobis(&mu, &mu, &eye).unwrap(), 0.0);
        let x = DVector::from_vec(vec![4.0, 6.0]);
        assert!((mahalanobis(&x, &mu, &eye).unwrap() - 25.0).abs() < 1e-12);
        assert!(matches!(
            mahalanobis(&DVector::zeros(3), &mu, &eye),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mahalanobis_matches_linear_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma = random_spd(4, &mut rng);
        let mu = DVector::from_fn(4, |_, _| rng.random::<f64>());
        let x = DVector::from_fn(4, |_, _| rng.random::<f64>() * 3.0);
        let d = &x - &mu;
        let solved = sigma.clone().lu().solve(&d).unwrap();
        let oracle = d.dot(&solved);
        let t = mahalanobis(&x, &mu, &sigma).unwrap();
        assert!((t - oracle).abs() < 1e-12 * oracle.max(1.0));
        let model = ResModel::normalized(
            mu.clone(),
            sigma.clone(),
            DensityGenerator::gaussian(4).unwrap(),
            Constraint::TraceN,
        )
        .unwrap();
        let t2 = model.mahalanobis_slice(x.as_slice());
        assert!((t2 - mahalanobis(&x, &mu, model.sigma()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_models() {
        let g = DensityGenerator::gaussian(2).unwrap();
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ResModel::new(DVector::zeros(2), bad, g.clone(), Constraint::TraceN).is_err());
        let off = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        assert!(ResModel::new(
            DVector::zeros(2),
            off.clone(),
            g.clone(),
            Constraint::TraceN
        )
        .is_err());
        let ok = ResModel::normalized(DVector::zeros(2), off, g, Constraint::TraceN).unwrap();
        assert_eq!(ok.sigma(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn logpdf_invariant_under_orthogonal_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in [
            GeneratorKind::Gaussian,
            GeneratorKind::StudentT { nu: 4.0 },
            GeneratorKind::GeneralizedGaussian { s: 0.5 },
        ] {
            for _ in 0..10 {
                let n = 3;
                let g = DensityGenerator::new(kind, n).unwrap();
                let sigma = random_spd(n, &mut rng);
                let mu = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let x = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
                let q = random_orthogonal(n, &mut rng);
                let m1 =
                    ResModel::normalized(mu.clone(), sigma.clone(), g.clone(), Constraint::TraceN)
                        .unwrap();
                let rotated = &q * m1.sigma() * q.transpose();
                let m2 = ResModel::new(
                    &q * &mu,
                    (&rotated + rotated.transpose()) * 0.5,
                    g,
                    Constraint::TraceN,
                )
                .unwrap();
                let a = res_logpdf(&x, &m1).unwrap();
                let b = res_logpdf(&(&q * &x), &m2).unwrap();
                assert!((a - b).abs() < 1e-10, "{kind:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gaussian_generator_matches_multivariate_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 3;
        let s2 = 1.0; // trace constraint forces σ² = 1 for an isotropic scatter
        let m = ResModel::standard(DensityGenerator::gaussian(n).unwrap()).unwrap();
        for _ in 0..20 {
            let x = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 1.5);
            let oracle = -0.5 * n as f64 * (2.0 * PI * s2).ln() - x.norm_squared() / (2.0 * s2);
            assert!((res_logpdf(&x, &m).unwrap() - oracle).abs() < 1e-10);
        }
    }
}
