//! Gaussian-process priors over latent forces in state-space form.
//!
//! The latent kernel is Matérn-3/2, which has an exact two-dimensional SDE
//! representation, so discretization is exact for any step size.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cov_sqrt, symmetrize};

/// SDE state dimension of the Matérn-3/2 representation.
pub const MATERN32_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Seconds.
    pub lengthscale: f64,
    pub variance: f64,
}

impl KernelParams {
    pub fn new(lengthscale: f64, variance: f64) -> Result<Self> {
        if !(lengthscale > 0.0 && lengthscale.is_finite()) || !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::invalid(format!(
                "kernel needs positive lengthscale and variance, got ({lengthscale}, {variance})"
            )));
        }
        Ok(KernelParams { lengthscale, variance })
    }

    /// Matérn-3/2 covariance at lag `tau` seconds.
    pub fn matern32(&self, tau: f64) -> f64 {
        let r = 3f64.sqrt() * tau.abs() / self.lengthscale;
        self.variance * (1.0 + r) * (-r).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSdeModel {
    /// Drift matrix (1/s).
    pub f: DMatrix<f64>,
    pub l_noise: DVector<f64>,
    /// White-noise spectral density.
    pub q_c: f64,
    pub p_inf: DMatrix<f64>,
    pub h_gp: RowDVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteKernelStep {
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

pub fn kernel_to_ssm(k: &KernelParams) -> LatentSdeModel {
    let alpha = 3f64.sqrt() / k.lengthscale;
    let f = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -alpha * alpha, -2.0 * alpha]);
    let l_noise = DVector::from_column_slice(&[0.0, 1.0]);
    let q_c = 4.0 * alpha.powi(3) * k.variance;
    let p_inf = DMatrix::from_diagonal(&DVector::from_column_slice(&[k.variance, alpha * alpha * k.variance]));
    let h_gp = RowDVector::from_row_slice(&[1.0, 0.0]);
    LatentSdeModel {
        f,
        l_noise,
        q_c,
        p_inf,
        h_gp,
    }
}

impl LatentSdeModel {
    pub fn dim(&self) -> usize {
        self.f.nrows()
    }

    /// `F·P∞ + P∞·Fᵀ + L·q_c·Lᵀ`, zero for a stationary model.
    pub fn lyapunov_residual(&self) -> DMatrix<f64> {
        &self.f * &self.p_inf + &self.p_inf * self.f.transpose()
            + &self.l_noise * self.l_noise.transpose() * self.q_c
    }
}

/// Exact discretization over a step of `dt` seconds.
pub fn discretize(sde: &LatentSdeModel, dt: f64) -> DiscreteKernelStep {
    let a = (&sde.f * dt).exp();
    let mut q = &sde.p_inf - &a * &sde.p_inf * a.transpose();
    symmetrize(&mut q);
    DiscreteKernelStep { a, q }
}

/// Draws `n` values of a zero-mean GP sampled every `dt` seconds, started from
/// the stationary distribution.
pub fn sample_gp(sde: &LatentSdeModel, dt: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = discretize(sde, dt);
    let d = sde.dim();
    let p_sqrt = cov_sqrt(&sde.p_inf).ok_or_else(|| Error::invalid("stationary covariance is not PSD"))?;
    let q_sqrt = cov_sqrt(&step.q).ok_or_else(|| Error::invalid("process noise is not PSD"))?;
    let normal = |rng: &mut ChaCha8Rng| DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    let mut state = &p_sqrt * normal(&mut rng);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            state = &step.a * state + &q_sqrt * normal(&mut rng);
        }
        out.push((&sde.h_gp * &state)[0]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closed_form_a(k: &KernelParams, dt: f64) -> DMatrix<f64> {
        let alpha = 3f64.sqrt() / k.lengthscale;
        let e = (-alpha * dt).exp();
        DMatrix::from_row_slice(
            2,
            2,
            &[e * (1.0 + alpha * dt), e * dt, -e * alpha * alpha * dt, e * (1.0 - alpha * dt)],
        )
    }

    #[test]
    fn unit_kernel_constants() {
        let sde = kernel_to_ssm(&KernelParams::new(1.0, 1.0).unwrap());
        assert!((sde.f[(1, 0)] + 3.0).abs() < 1e-12);
        assert!((sde.q_c - 20.784_609_690_826_528).abs() < 1e-9);
        assert!(sde.lyapunov_residual().amax() < 1e-10);
    }

    #[test]
    fn variance_scaling() {
        let a = kernel_to_ssm(&KernelParams::new(0.3, 1.0).unwrap());
        let b = kernel_to_ssm(&KernelParams::new(0.3, 2.0).unwrap());
        assert_eq!(a.f, b.f);
        assert!((&a.p_inf * 2.0 - &b.p_inf).amax() < 1e-12);
        assert!((a.q_c * 2.0 - b.q_c).abs() < 1e-12);
    }

    #[test]
    fn expm_matches_closed_form() {
        for &(l, dt) in &[(1.0, 0.01), (0.05, 1.0 / 1600.0), (0.3, 0.7), (2.0, 5.0)] {
            let k = KernelParams::new(l, 1.3).unwrap();
            let step = discretize(&kernel_to_ssm(&k), dt);
            assert!((&step.a - closed_form_a(&k, dt)).amax() < 1e-12);
        }
    }

    #[test]
    fn small_step_limit() {
        let sde = kernel_to_ssm(&KernelParams::new(1.0, 1.0).unwrap());
        let step = discretize(&sde, 1e-9);
        assert!((&step.a - DMatrix::identity(2, 2)).norm() < 1e-6);
        assert!(step.q.norm() < 1e-6);
    }

    #[test]
    fn stationarity_and_semigroup() {
        let sde = kernel_to_ssm(&KernelParams::new(0.2, 0.7).unwrap());
        let dt = 0.013;
        let s1 = discretize(&sde, dt);
        let s2 = discretize(&sde, 2.0 * dt);
        assert!((&s1.a * &sde.p_inf * s1.a.transpose() + &s1.q - &sde.p_inf).amax() < 1e-10);
        assert!((&s1.a * &s1.a - &s2.a).amax() < 1e-10);
    }

    #[test]
    fn sample_variance_matches_kernel() {
        let k = KernelParams::new(0.1, 2.0).unwrap();
        let sde = kernel_to_ssm(&k);
        let draws: Vec<f64> = (0..10_000).map(|s| sample_gp(&sde, 0.01, 1, s).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var / k.variance - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn sample_autocorrelation_at_one_lengthscale() {
        let k = KernelParams::new(0.05, 1.0).unwrap();
        let sde = kernel_to_ssm(&k);
        let dt = 0.005;
        let lag = 10;
        let mut num = 0.0;
        let mut den = 0.0;
        for seed in 0..200 {
            let x = sample_gp(&sde, dt, 2000, seed).unwrap();
            num += x.windows(lag + 1).map(|w| w[0] * w[lag]).sum::<f64>();
            den += x[..x.len() - lag].iter().map(|v| v * v).sum::<f64>();
        }
        let expected = (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp();
        assert!((expected - 0.4834).abs() < 1e-4);
        assert!((num / den - expected).abs() < 0.05, "{}", num / den);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let sde = kernel_to_ssm(&KernelParams::new(0.1, 1.0).unwrap());
        assert_eq!(sample_gp(&sde, 0.01, 50, 7).unwrap(), sample_gp(&sde, 0.01, 50, 7).unwrap());
        assert_ne!(sample_gp(&sde, 0.01, 50, 7).unwrap(), sample_gp(&sde, 0.01, 50, 8).unwrap());
    }
}
