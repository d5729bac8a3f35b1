//! Gaussian-process data law: temporal Gram matrix from a kernel over frame
//! embeddings, spatial covariance, sampling, and exact conditioning of
//! missing frames on observed ones.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Frame embedding defining the pairwise-distance function `f(m)` on gaps.
///
/// `linear_gap` is the implicit embedding with `f(m) = m`; `sinusoidal`
/// places frames on a circle of radius `r` with period `C`, giving
/// `f(m) = 2 r |sin(pi m / C)|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingSpec {
    LinearGap,
    Sinusoidal {
        r: f64,
        #[serde(rename = "C")]
        c: f64,
    },
}

impl EmbeddingSpec {
    /// Distance between embeddings of frames a gap `m` apart.
    pub fn gap_distance(&self, m: usize) -> f64 {
        match self {
            EmbeddingSpec::LinearGap => m as f64,
            EmbeddingSpec::Sinusoidal { r, c } => {
                2.0 * r * (std::f64::consts::PI * m as f64 / c).sin().abs()
            }
        }
    }

    /// Embedding dimension `d_e` (0 when no explicit vectors exist).
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSpec::LinearGap => 0,
            EmbeddingSpec::Sinusoidal { .. } => 2,
        }
    }

    /// Explicit embedding vectors, when the kind provides them.
    pub fn vectors(&self, h: usize) -> Option<Vec<DVector<f64>>> {
        match self {
            EmbeddingSpec::LinearGap => None,
            EmbeddingSpec::Sinusoidal { r, c } => Some(
                (0..h)
                    .map(|i| {
                        let a = 2.0 * std::f64::consts::PI * i as f64 / c;
                        DVector::from_vec(vec![r * a.sin(), r * a.cos()])
                    })
                    .collect(),
            ),
        }
    }

    /// Smallest squared-distance gap `min_m f^2(m+1) - f^2(m)` over the gaps
    /// used by a length-`h` sequence.
    pub fn min_sq_gap(&self, h: usize) -> f64 {
        (0..h.saturating_sub(1))
            .map(|m| {
                let a = self.gap_distance(m + 1);
                let b = self.gap_distance(m);
                a * a - b * b
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self, h: usize) -> Result<()> {
        match self {
            EmbeddingSpec::LinearGap => Ok(()),
            EmbeddingSpec::Sinusoidal { r, c } => {
                if *r <= 0.0 {
                    return Err(Error::InvalidParam(format!("embedding radius r = {r} must be > 0")));
                }
                if *c < 2.0 * (h.saturating_sub(1)) as f64 {
                    return Err(Error::InvalidParam(format!(
                        "embedding period C = {c} must be >= 2 (H - 1) = {}",
                        2 * (h - 1)
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Stationary temporal kernel evaluated on embedding distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Rbf { lengthscale: f64 },
    Laplace { lengthscale: f64 },
    Matern32 { lengthscale: f64 },
    Matern52 { lengthscale: f64 },
}

impl KernelSpec {
    pub fn lengthscale(&self) -> f64 {
        match self {
            KernelSpec::Rbf { lengthscale }
            | KernelSpec::Laplace { lengthscale }
            | KernelSpec::Matern32 { lengthscale }
            | KernelSpec::Matern52 { lengthscale } => *lengthscale,
        }
    }

    /// Kernel value at embedding distance `dist`; `eval(0) = 1` for all kinds.
    pub fn eval(&self, dist: f64) -> f64 {
        let l = self.lengthscale();
        match self {
            KernelSpec::Rbf { .. } => (-dist * dist / (2.0 * l * l)).exp(),
            KernelSpec::Laplace { .. } => (-dist / l).exp(),
            KernelSpec::Matern32 { .. } => {
                let s = 3f64.sqrt() * dist / l;
                (1.0 + s) * (-s).exp()
            }
            KernelSpec::Matern52 { .. } => {
                let s = 5f64.sqrt() * dist / l;
                (1.0 + s + s * s / 3.0) * (-s).exp()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscale() > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!(
                "kernel lengthscale {} must be > 0",
                self.lengthscale()
            )))
        }
    }
}

/// Build the `H x H` temporal Gram matrix `Gamma[i][j] = gamma(f(|i-j|))`.
///
/// Fails with the smallest eigenvalue reported when the result is not
/// (numerically) positive definite.
pub fn build_temporal_gram(
    kernel: &KernelSpec,
    embedding: &EmbeddingSpec,
    h: usize,
) -> Result<DMatrix<f64>> {
    if h < 2 {
        return Err(Error::InvalidParam(format!("H = {h} must be >= 2")));
    }
    kernel.validate()?;
    embedding.validate(h)?;
    let by_gap: Vec<f64> = (0..h).map(|m| kernel.eval(embedding.gap_distance(m))).collect();
    let gram = DMatrix::from_fn(h, h, |i, j| by_gap[i.abs_diff(j)]);
    check_gram_pd(&gram)?;
    Ok(gram)
}

fn check_gram_pd(gram: &DMatrix<f64>) -> Result<()> {
    let near_singular = match Cholesky::new(gram.clone()) {
        None => true,
        Some(chol) => {
            let diag = chol.l_dirty().diagonal();
            let max = diag.max();
            diag.min() < 1e-5 * max
        }
    };
    if near_singular {
        let lambda_min = gram.clone().symmetric_eigenvalues().min();
        return Err(Error::GramNotPd { lambda_min });
    }
    Ok(())
}

/// Full specification of the data law `N(mu, Gamma (x) Lambda)`.
#[derive(Clone, Debug)]
pub struct GpSpec {
    pub h: usize,
    pub d: usize,
    /// Mean over the vectorized sequence (length `H d`); zero by default.
    pub mean: DVector<f64>,
    /// Spatial covariance, `d x d` symmetric positive definite.
    pub lambda: DMatrix<f64>,
    pub kernel: KernelSpec,
    pub embedding: EmbeddingSpec,
    gram: DMatrix<f64>,
}

impl GpSpec {
    pub fn new(
        h: usize,
        d: usize,
        lambda: DMatrix<f64>,
        kernel: KernelSpec,
        embedding: EmbeddingSpec,
    ) -> Result<Self> {
        Self::with_mean(h, d, DVector::zeros(h * d), lambda, kernel, embedding)
    }

    pub fn with_mean(
        h: usize,
        d: usize,
        mean: DVector<f64>,
        lambda: DMatrix<f64>,
        kernel: KernelSpec,
        embedding: EmbeddingSpec,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParam("d must be >= 1".into()));
        }
        if lambda.nrows() != d || lambda.ncols() != d {
            return Err(Error::DimMismatch(format!(
                "lambda is {}x{}, expected {d}x{d}",
                lambda.nrows(),
                lambda.ncols()
            )));
        }
        if mean.len() != h * d {
            return Err(Error::DimMismatch(format!(
                "mean length {} != H d = {}",
                mean.len(),
                h * d
            )));
        }
        let sym_err = (&lambda - lambda.transpose()).abs().max();
        if sym_err > 1e-10 {
            return Err(Error::NotPd(format!("lambda asymmetric by {sym_err:.3e}")));
        }
        if Cholesky::new(lambda.clone()).is_none() {
            return Err(Error::NotPd("lambda failed Cholesky".into()));
        }
        let gram = build_temporal_gram(&kernel, &embedding, h)?;
        Ok(GpSpec { h, d, mean, lambda, kernel, embedding, gram })
    }

    /// Convenience constructor with identity spatial covariance.
    pub fn isotropic(h: usize, d: usize, kernel: KernelSpec, embedding: EmbeddingSpec) -> Result<Self> {
        Self::new(h, d, DMatrix::identity(d, d), kernel, embedding)
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn dim(&self) -> usize {
        self.h * self.d
    }

    /// Serialize to the structured-text config form.
    pub fn to_config(&self) -> GpConfig {
        GpConfig {
            h: self.h,
            d: self.d,
            kernel: self.kernel.clone(),
            embedding: self.embedding.clone(),
            lambda: self.lambda.transpose().as_slice().to_vec(),
            mean: if self.mean.iter().all(|&x| x == 0.0) {
                None
            } else {
                Some(self.mean.as_slice().to_vec())
            },
        }
    }
}

/// JSON-facing form of [`GpSpec`]: keys `H`, `d`, `kernel{kind,lengthscale}`,
/// `embedding{kind,r,C}`, `lambda` (row-major `d x d`), `mean` (optional).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GpConfig {
    #[serde(rename = "H")]
    pub h: usize,
    pub d: usize,
    pub kernel: KernelSpec,
    pub embedding: EmbeddingSpec,
    pub lambda: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
}

impl GpConfig {
    pub fn build(&self) -> Result<GpSpec> {
        if self.lambda.len() != self.d * self.d {
            return Err(Error::DimMismatch(format!(
                "lambda has {} entries, expected {}",
                self.lambda.len(),
                self.d * self.d
            )));
        }
        let lambda = DMatrix::from_row_slice(self.d, self.d, &self.lambda);
        let mean = match &self.mean {
            Some(m) => DVector::from_vec(m.clone()),
            None => DVector::zeros(self.h * self.d),
        };
        GpSpec::with_mean(self.h, self.d, mean, lambda, self.kernel.clone(), self.embedding.clone())
    }
}

/// Draw `n` i.i.d. sequences from the data law.
///
/// Uses per-factor Cholesky (`Lambda` and `Gamma` separately) so the
/// `Hd x Hd` Kronecker covariance is never materialized.
pub fn sample_sequences(spec: &GpSpec, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let chol_gamma = Cholesky::new(spec.gram.clone())
        .ok_or_else(|| Error::NotPd("gram failed Cholesky".into()))?;
    let chol_lambda = Cholesky::new(spec.lambda.clone())
        .ok_or_else(|| Error::NotPd("lambda failed Cholesky".into()))?;
    let l_gamma_t = chol_gamma.l().transpose();
    let l_lambda = chol_lambda.l();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (h, d) = (spec.h, spec.d);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z = DMatrix::from_fn(d, h, |_, _| StandardNormal.sample(&mut rng));
        // cov[vec(L_lam Z L_gam^T)] = Gamma (x) Lambda under frame-major stacking
        let y = &l_lambda * z * &l_gamma_t;
        let mut x = DVector::zeros(h * d);
        for i in 0..h {
            x.rows_mut(i * d, d).copy_from(&y.column(i));
        }
        out.push(x + &spec.mean);
    }
    Ok(out)
}

/// Conditional law of the missing block given the observed one, with all
/// covariance blocks and a cached factorization of `Sigma_obs`.
#[derive(Clone, Debug)]
pub struct ConditionalGaussian {
    pub obs_idx: Vec<usize>,
    pub miss_idx: Vec<usize>,
    pub sigma_obs: DMatrix<f64>,
    pub sigma_miss: DMatrix<f64>,
    /// Cross covariance `Cov[x_obs, x_miss]`, shape `d|I_obs| x d|I_miss|`.
    pub sigma_cor: DMatrix<f64>,
    /// Schur complement `Sigma_miss - Sigma_cor^T Sigma_obs^-1 Sigma_cor`,
    /// explicitly symmetrized.
    pub sigma_cond: DMatrix<f64>,
    pub mu_obs: DVector<f64>,
    pub mu_miss: DVector<f64>,
    pub gamma_obs: DMatrix<f64>,
    pub gamma_cor: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub d: usize,
    pub h: usize,
    obs_chol: Cholesky<f64, Dyn>,
}

impl ConditionalGaussian {
    pub fn dim_miss(&self) -> usize {
        self.d * self.miss_idx.len()
    }

    pub fn dim_obs(&self) -> usize {
        self.d * self.obs_idx.len()
    }

    /// Conditional mean `mu_miss + Sigma_cor^T Sigma_obs^-1 (x_obs - mu_obs)`.
    pub fn mu_cond(&self, x_obs: &DVector<f64>) -> DVector<f64> {
        let dev = x_obs - &self.mu_obs;
        let solved = self.obs_chol.solve(&dev);
        &self.mu_miss + self.sigma_cor.tr_mul(&solved)
    }

    /// `Sigma_obs^-1 b` through the cached factorization.
    pub fn solve_obs(&self, b: &DVector<f64>) -> DVector<f64> {
        self.obs_chol.solve(b)
    }

    /// Draw from the conditional law given `x_obs`.
    pub fn sample(&self, x_obs: &DVector<f64>, rng: &mut impl rand::Rng) -> DVector<f64> {
        let chol = Cholesky::new(self.sigma_cond.clone())
            .expect("sigma_cond is positive definite by construction");
        let m = self.dim_miss();
        let z = DVector::from_fn(m, |_, _| StandardNormal.sample(rng));
        self.mu_cond(x_obs) + chol.l() * z
    }
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Condition the GP on the observed frames of `mask`.
pub fn condition_on_observed(spec: &GpSpec, mask: &Mask) -> Result<ConditionalGaussian> {
    if mask.len() != spec.h {
        return Err(Error::DimMismatch(format!(
            "mask length {} != H = {}",
            mask.len(),
            spec.h
        )));
    }
    let obs_idx = mask.obs_indices().to_vec();
    let miss_idx = mask.miss_indices().to_vec();
    if obs_idx.is_empty() || miss_idx.is_empty() {
        return Err(Error::DegenerateMask(
            "need 0 < |I_miss| < H for conditioning".into(),
        ));
    }
    let g = &spec.gram;
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| g[(rows[i], cols[j])])
    };
    let gamma_obs = pick(&obs_idx, &obs_idx);
    let gamma_miss = pick(&miss_idx, &miss_idx);
    let gamma_cor = pick(&obs_idx, &miss_idx);

    let sigma_obs = kron(&gamma_obs, &spec.lambda);
    let sigma_miss = kron(&gamma_miss, &spec.lambda);
    let sigma_cor = kron(&gamma_cor, &spec.lambda);

    let obs_chol = Cholesky::new(sigma_obs.clone())
        .ok_or_else(|| Error::NotPd("sigma_obs failed Cholesky".into()))?;

    let solved = obs_chol.solve(&sigma_cor);
    let schur = &sigma_miss - sigma_cor.tr_mul(&solved);
    let sigma_cond = (&schur + schur.transpose()) * 0.5;

    let d = spec.d;
    let pick_mean = |idx: &[usize]| {
        let mut v = DVector::zeros(idx.len() * d);
        for (k, &i) in idx.iter().enumerate() {
            v.rows_mut(k * d, d).copy_from(&spec.mean.rows(i * d, d));
        }
        v
    };
    let mu_obs = pick_mean(&obs_idx);
    let mu_miss = pick_mean(&miss_idx);

    Ok(ConditionalGaussian {
        obs_idx,
        miss_idx,
        sigma_obs,
        sigma_miss,
        sigma_cor,
        sigma_cond,
        mu_obs,
        mu_miss,
        gamma_obs,
        gamma_cor,
        lambda: spec.lambda.clone(),
        d,
        h: spec.h,
        obs_chol,
    })
}

/// Condition number `lambda_max / lambda_min` of a symmetric PD matrix.
pub fn condition_number(m: &DMatrix<f64>) -> Result<f64> {
    let sym_err = (m - m.transpose()).abs().max();
    if sym_err > 1e-8 {
        return Err(Error::NotPd(format!("input asymmetric by {sym_err:.3e}")));
    }
    let eigs = m.clone().symmetric_eigenvalues();
    let (min, max) = (eigs.min(), eigs.max());
    if min <= 0.0 {
        return Err(Error::NotPd(format!("not positive definite (lambda_min = {min:.3e})")));
    }
    Ok(max / min)
}

/// Extreme eigenvalues `(lambda_min, lambda_max)` of a symmetric matrix.
pub fn eigen_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let eigs = m.clone().symmetric_eigenvalues();
    (eigs.min(), eigs.max())
}
