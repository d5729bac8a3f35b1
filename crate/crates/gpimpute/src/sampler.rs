//! Forward corruption and backward-SDE sample generation against any
//! score representation.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::{DiffusionSchedule, ScoreFn};

/// Time-stepping scheme for the backward SDE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    #[default]
    EulerMaruyama,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub schedule: DiffusionSchedule,
    pub n_steps: usize,
    #[serde(default)]
    pub discretization: Discretization,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(schedule: DiffusionSchedule, n_steps: usize, seed: u64) -> Self {
        SamplerConfig { schedule, n_steps, discretization: Discretization::EulerMaruyama, seed }
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            schedule: DiffusionSchedule::default(),
            n_steps: 500,
            discretization: Discretization::EulerMaruyama,
            seed: 0,
        }
    }
}

/// Exact forward corruption `v_t = alpha_t x + sigma_t z` via the
/// closed-form transition of the noising process.
pub fn forward_corrupt(x_miss: &DVector<f64>, t: f64, seed: u64) -> Result<DVector<f64>> {
    if t < 0.0 {
        return Err(Error::InvalidParam(format!("t = {t} must be >= 0")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Ok(forward_corrupt_with(x_miss, t, &mut rng))
}

pub fn forward_corrupt_with(
    x_miss: &DVector<f64>,
    t: f64,
    rng: &mut impl rand::Rng,
) -> DVector<f64> {
    let alpha = (-t / 2.0).exp();
    let sigma = (1.0 - (-t).exp()).sqrt();
    let z = DVector::from_fn(x_miss.len(), |_, _| StandardNormal.sample(rng));
    x_miss * alpha + z * sigma
}

/// Integrate the backward SDE from standard-normal initialization down to
/// the early-stop time; the returned state targets the early-stopped law.
///
/// The observed context enters only through the score and is never
/// mutated. Deterministic given `cfg.seed`.
pub fn backward_sample<S: ScoreFn + ?Sized>(
    score: &S,
    x_obs: &DVector<f64>,
    dim_miss: usize,
    cfg: &SamplerConfig,
) -> Result<DVector<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    backward_sample_with(score, x_obs, dim_miss, cfg, &mut rng)
}

pub fn backward_sample_with<S: ScoreFn + ?Sized>(
    score: &S,
    x_obs: &DVector<f64>,
    dim_miss: usize,
    cfg: &SamplerConfig,
    rng: &mut impl rand::Rng,
) -> Result<DVector<f64>> {
    if cfg.n_steps == 0 {
        return Err(Error::InvalidParam("n_steps must be >= 1".into()));
    }
    let sch = &cfg.schedule;
    let h = sch.span() / cfg.n_steps as f64;
    let sqrt_h = h.sqrt();
    let mut v = DVector::from_fn(dim_miss, |_, _| StandardNormal.sample(rng));
    for step in 0..cfg.n_steps {
        let t = sch.t_end - step as f64 * h;
        let s = score.score(&v, x_obs, t);
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteScore { step });
        }
        let z: DVector<f64> = DVector::from_fn(dim_miss, |_, _| StandardNormal.sample(rng));
        for i in 0..dim_miss {
            v[i] += h * (0.5 * v[i] + s[i]) + sqrt_h * z[i];
        }
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{condition_on_observed, GpSpec, KernelSpec};
    use crate::mask::Mask;
    use crate::score::ExactScore;
    use crate::EmbeddingSpec;
    use nalgebra::DMatrix;

    fn toy_exact(h: usize, miss: &[usize], l: f64) -> ExactScore {
        let spec = GpSpec::isotropic(
            h,
            1,
            KernelSpec::Laplace { lengthscale: l },
            EmbeddingSpec::LinearGap,
        )
        .unwrap();
        let cond =
            condition_on_observed(&spec, &Mask::from_miss_indices(h, miss).unwrap()).unwrap();
        ExactScore::new(cond, DiffusionSchedule::default())
    }

    #[test]
    fn zero_time_corruption_is_identity() {
        let x = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let v = forward_corrupt(&x, 0.0, 5).unwrap();
        assert_eq!(v, x);
    }

    #[test]
    fn late_corruption_forgets_the_data() {
        let x = DVector::from_vec(vec![4.0, -4.0]);
        let n = 10_000;
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut sum = DVector::zeros(2);
        let mut sum_sq = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let v = forward_corrupt_with(&x, 20.0, &mut rng);
            sum += &v;
            sum_sq += &v * v.transpose();
        }
        let mean = sum / n as f64;
        let cov = sum_sq / n as f64 - &mean * mean.transpose();
        let se_mean = (1.0 / n as f64).sqrt();
        let se_var = (2.0 / n as f64).sqrt();
        for i in 0..2 {
            assert!(mean[i].abs() < 5.0 * se_mean);
            assert!((cov[(i, i)] - 1.0).abs() < 5.0 * se_var);
        }
        assert!(cov[(0, 1)].abs() < 5.0 * se_mean);
    }

    #[test]
    fn corruption_reproducible_under_seed() {
        let x = DVector::from_vec(vec![0.5, 0.6, 0.7]);
        assert_eq!(forward_corrupt(&x, 1.0, 77).unwrap(), forward_corrupt(&x, 1.0, 77).unwrap());
    }

    #[test]
    fn zero_steps_is_rejected_one_step_runs() {
        let ex = toy_exact(4, &[1], 1.0);
        let x_obs = DVector::zeros(3);
        let mut cfg = SamplerConfig::default();
        cfg.n_steps = 0;
        assert!(backward_sample(&ex, &x_obs, 1, &cfg).is_err());
        cfg.n_steps = 1;
        let v = backward_sample(&ex, &x_obs, 1, &cfg).unwrap();
        assert!(v[0].is_finite());
    }

    #[test]
    fn sampler_reproducible_under_seed() {
        let ex = toy_exact(5, &[2, 3], 1.5);
        let x_obs = DVector::from_vec(vec![0.4, -0.1, 0.8]);
        let cfg = SamplerConfig::new(DiffusionSchedule::default(), 50, 1234);
        let a = backward_sample(&ex, &x_obs, 2, &cfg).unwrap();
        let b = backward_sample(&ex, &x_obs, 2, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_scores_abort_with_step_index() {
        struct Bad;
        impl ScoreFn for Bad {
            fn score(&self, v: &DVector<f64>, _x: &DVector<f64>, _t: f64) -> DVector<f64> {
                DVector::from_element(v.len(), f64::NAN)
            }
        }
        let cfg = SamplerConfig::new(DiffusionSchedule::default(), 10, 0);
        let err = backward_sample(&Bad, &DVector::zeros(1), 2, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteScore { step: 0 }));
    }

    #[test]
    fn standard_normal_target_moments() {
        // identity conditional: the terminal law is essentially N(0, I)
        let spec = GpSpec::isotropic(
            3,
            1,
            KernelSpec::Rbf { lengthscale: 1e-3 },
            EmbeddingSpec::LinearGap,
        )
        .unwrap();
        let cond =
            condition_on_observed(&spec, &Mask::from_miss_indices(3, &[0, 2]).unwrap()).unwrap();
        let sch = DiffusionSchedule::new(1e-4, 10.0).unwrap();
        let ex = ExactScore::new(cond, sch);
        let x_obs = DVector::zeros(1);
        let n = 4000;
        let mut sum = DVector::zeros(2);
        let mut sum_sq = DMatrix::zeros(2, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let cfg = SamplerConfig::new(sch, 300, 0);
        let pinned = ex.pinned(&x_obs).unwrap();
        for _ in 0..n {
            let v = backward_sample_with(pinned.as_ref(), &x_obs, 2, &cfg, &mut rng).unwrap();
            sum += &v;
            sum_sq += &v * v.transpose();
        }
        let mean = sum / n as f64;
        let cov = sum_sq / n as f64 - &mean * mean.transpose();
        let se_mean = (1.0 / n as f64).sqrt();
        let se_var = (2.0 / n as f64).sqrt();
        for i in 0..2 {
            assert!(mean[i].abs() < 5.0 * se_mean + 0.02, "mean[{i}] = {}", mean[i]);
            assert!(
                (cov[(i, i)] - 1.0).abs() < 5.0 * se_var + 0.03,
                "var[{i}] = {}",
                cov[(i, i)]
            );
        }
    }

    #[test]
    fn toy_conditional_moments_match_early_stopped_law() {
        let spec = GpSpec::isotropic(
            3,
            1,
            KernelSpec::Laplace { lengthscale: 1.0 },
            EmbeddingSpec::LinearGap,
        )
        .unwrap();
        let mask = Mask::from_miss_indices(3, &[1]).unwrap();
        let cond = condition_on_observed(&spec, &mask).unwrap();
        let sch = DiffusionSchedule::new(1e-3, 8.0).unwrap();
        let ex = ExactScore::new(cond.clone(), sch);
        let x_obs = DVector::from_vec(vec![1.0, -0.5]);
        let mu = cond.mu_cond(&x_obs);
        let a0 = sch.alpha(sch.t0);
        let target_mean = &mu * a0;
        let target_var = a0 * a0 * cond.sigma_cond[(0, 0)] + sch.sigma2(sch.t0);
        let n = 20_000;
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let cfg = SamplerConfig::new(sch, 400, 0);
        let pinned = ex.pinned(&x_obs).unwrap();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let v = backward_sample_with(pinned.as_ref(), &x_obs, 1, &cfg, &mut rng).unwrap();
            sum += v[0];
            sum_sq += v[0] * v[0];
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let se_mean = (target_var / n as f64).sqrt();
        let se_var = target_var * (2.0 / n as f64).sqrt();
        // 5 SE plus a small discretization allowance
        assert!(
            (mean - target_mean[0]).abs() < 5.0 * se_mean + 0.01,
            "mean {mean} vs {}",
            target_mean[0]
        );
        assert!(
            (var - target_var).abs() < 5.0 * se_var + 0.02,
            "var {var} vs {target_var}"
        );
    }

    #[test]
    fn refinement_reduces_moment_error() {
        // common random numbers across grids; bias decreases with h
        let spec = GpSpec::isotropic(
            3,
            1,
            KernelSpec::Laplace { lengthscale: 1.0 },
            EmbeddingSpec::LinearGap,
        )
        .unwrap();
        let mask = Mask::from_miss_indices(3, &[1]).unwrap();
        let cond = condition_on_observed(&spec, &mask).unwrap();
        let sch = DiffusionSchedule::new(1e-3, 8.0).unwrap();
        let ex = ExactScore::new(cond.clone(), sch);
        let x_obs = DVector::from_vec(vec![1.2, 0.3]);
        let mu = cond.mu_cond(&x_obs);
        let a0 = sch.alpha(sch.t0);
        let t_mean = mu[0] * a0;
        let t_var = a0 * a0 * cond.sigma_cond[(0, 0)] + sch.sigma2(sch.t0);
        let pinned = ex.pinned(&x_obs).unwrap();
        let n = 20_000;
        let mut errs = Vec::new();
        for &steps in &[8usize, 16, 32] {
            let cfg = SamplerConfig::new(sch, steps, 0);
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let v = backward_sample_with(pinned.as_ref(), &x_obs, 1, &cfg, &mut rng).unwrap();
                sum += v[0];
                sum_sq += v[0] * v[0];
            }
            let mean = sum / n as f64;
            let var = sum_sq / n as f64 - mean * mean;
            errs.push((mean - t_mean).abs() + (var - t_var).abs());
        }
        assert!(
            errs[0] > errs[1] && errs[1] > errs[2],
            "refinement errors not monotone: {errs:?}"
        );
    }
}
