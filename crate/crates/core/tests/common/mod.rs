#![allow(dead_code)]

use lfm_audio::audio_io::EnvelopeMatrix;
use lfm_audio::gpssm::{kernel_to_ssm, sample_gp, KernelParams};
use lfm_audio::lfm::{build_layout, GaussianState, LfmDynamics, LfmParams, Nonlinearity, StateLayout};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct KfRun {
    pub predicted: Vec<GaussianState>,
    pub filtered: Vec<GaussianState>,
    pub loglik: f64,
}

/// Transition matrix of a linear LFM, written out entry by entry.
pub fn linear_transition_matrix(dyns: &LfmDynamics) -> DMatrix<f64> {
    let p = &dyns.params;
    let l = &dyns.layout;
    let dt = dyns.dt;
    let mut f = DMatrix::zeros(l.n(), l.n());
    for m in 0..l.m {
        f[(m, m)] = 1.0 - dt * p.damping[m];
        for &lag in &p.active_feedback {
            f[(m, l.output_history(lag, m))] += dt * p.feedback[m][lag - 1];
        }
        for r in 0..l.r {
            for &q in &p.active_lags {
                let col = if q == 0 { l.latent(r, 0) } else { l.latent_history(q, r) };
                f[(m, col)] += dt * p.sensitivity[m][r][q];
            }
        }
    }
    for (r, step) in dyns.kernel_steps().iter().enumerate() {
        let o = l.latent(r, 0);
        f.view_mut((o, o), (l.d, l.d)).copy_from(&step.a);
    }
    for lag in 1..=l.p {
        for m in 0..l.m {
            let src = if lag == 1 { m } else { l.output_history(lag - 1, m) };
            f[(l.output_history(lag, m), src)] = 1.0;
        }
        for r in 0..l.r {
            let src = if lag == 1 { l.latent(r, 0) } else { l.latent_history(lag - 1, r) };
            f[(l.latent_history(lag, r), src)] = 1.0;
        }
    }
    f
}

/// Textbook Kalman filter with selector measurements.
pub fn exact_kf(
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    observed: &[usize],
    sigma2: f64,
    initial: &GaussianState,
    obs: &DMatrix<f64>,
    skip: &[bool],
) -> KfRun {
    let n = f.nrows();
    let h = DMatrix::from_fn(observed.len(), n, |i, j| if observed[i] == j { 1.0 } else { 0.0 });
    let mut run = KfRun {
        predicted: Vec::new(),
        filtered: Vec::new(),
        loglik: 0.0,
    };
    let mut cur = initial.clone();
    for k in 0..obs.ncols() {
        let prior = if k == 0 {
            cur.clone()
        } else {
            GaussianState {
                mean: f * &cur.mean,
                cov: f * &cur.cov * f.transpose() + q,
            }
        };
        run.predicted.push(prior.clone());
        if skip[k] {
            cur = prior;
        } else {
            let y: DVector<f64> = obs.column(k).into_owned();
            let s = &h * &prior.cov * h.transpose() + DMatrix::identity(observed.len(), observed.len()) * sigma2;
            let s_inv = s.clone().try_inverse().unwrap();
            let gain = &prior.cov * h.transpose() * &s_inv;
            let v = y - &h * &prior.mean;
            run.loglik += -0.5
                * (observed.len() as f64 * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + (v.transpose() * &s_inv * &v)[0]);
            cur = GaussianState {
                mean: &prior.mean + &gain * v,
                cov: (DMatrix::identity(n, n) - &gain * &h) * &prior.cov,
            };
        }
        run.filtered.push(cur.clone());
    }
    run
}

/// Textbook RTS smoother for a linear model.
pub fn exact_rts(f: &DMatrix<f64>, run: &KfRun) -> Vec<GaussianState> {
    let t = run.filtered.len();
    let mut out = vec![run.filtered[t - 1].clone(); t];
    for k in (0..t - 1).rev() {
        let filt = &run.filtered[k];
        let pred = &run.predicted[k + 1];
        // G = P·Fᵀ·P⁻¹ via a Cholesky solve of Gᵀ
        let g = pred.cov.clone().cholesky().unwrap().solve(&(f * &filt.cov)).transpose();
        out[k] = GaussianState {
            mean: &filt.mean + &g * (&out[k + 1].mean - &pred.mean),
            cov: &filt.cov + &g * (&out[k + 1].cov - &pred.cov) * g.transpose(),
        };
    }
    out
}

/// Dense-kernel GP regression posterior mean at the training inputs.
pub fn dense_gp_mean(k: &KernelParams, times: &[f64], y: &[f64], sigma2: f64) -> Vec<f64> {
    let n = times.len();
    let kmat = DMatrix::from_fn(n, n, |i, j| k.matern32(times[i] - times[j]));
    let noisy = &kmat + DMatrix::identity(n, n) * sigma2;
    let alpha = noisy.cholesky().unwrap().solve(&DVector::from_column_slice(y));
    (kmat * alpha).iter().copied().collect()
}

/// Linear LFM (identity forcing, γ = 1) with a few couplings switched on.
pub fn linear_fixture(m: usize, r: usize, p: usize) -> (LfmParams, StateLayout) {
    let kernels: Vec<KernelParams> = (0..r).map(|i| KernelParams::new(0.04 + 0.03 * i as f64, 0.5 + 0.2 * i as f64).unwrap()).collect();
    let feedback: Vec<usize> = [1, 2].into_iter().filter(|l| *l <= p).collect();
    let lags: Vec<usize> = [0, 1, 3].into_iter().filter(|l| *l <= p).collect();
    let mut params = LfmParams::new(m, p, kernels, 0.02, feedback.clone(), lags.clone());
    params.nonlinearity = Nonlinearity::Identity;
    for i in 0..m {
        params.damping[i] = 4.0 + 3.0 * i as f64;
        for &lag in &feedback {
            params.feedback[i][lag - 1] = 0.3 / lag as f64;
        }
        for f in 0..r {
            for &q in &lags {
                params.sensitivity[i][f][q] = 1.0 + 0.5 * f as f64 - 0.2 * q as f64 + 0.1 * i as f64;
            }
        }
    }
    (params, build_layout(m, r, p, 2).unwrap())
}

/// Envelopes simulated from the model itself: GP latents, deterministic
/// outputs, Gaussian measurement noise (clamped at zero).
pub fn simulate(params: &LfmParams, layout: &StateLayout, frames: usize, frame_rate: f64, first: &[f64], seed: u64) -> EnvelopeMatrix {
    let dt = 1.0 / frame_rate;
    let dyns = LfmDynamics::new(params.clone(), *layout, dt).unwrap();
    let mut latents = DMatrix::zeros(layout.r, frames);
    for (r, k) in params.kernels.iter().enumerate() {
        let path = sample_gp(&kernel_to_ssm(k), dt, frames, seed.wrapping_mul(31).wrapping_add(r as u64)).unwrap();
        latents.set_row(r, &DVector::from_vec(path).transpose());
    }
    let clean = dyns.drive(first, &latents).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let noise = Normal::new(0.0, params.sigma2.sqrt()).unwrap();
    let values = clean.map(|v| (v + noise.sample(&mut rng)).max(0.0));
    EnvelopeMatrix::new(values, frame_rate, Vec::new()).unwrap()
}

pub const SYNTH_FRAME_RATE: f64 = 1600.0;

/// Known softplus LFM with three channels, one force and two history lags.
pub fn synthetic_truth() -> (LfmParams, StateLayout) {
    let kernels = vec![KernelParams::new(0.08, 1.0).unwrap()];
    let mut p = LfmParams::new(3, 2, kernels, 4e-4, vec![1, 2], vec![0, 1]);
    p.damping = vec![12.0, 20.0, 30.0];
    p.gamma = vec![0.9, 0.8, 1.0];
    p.feedback = vec![vec![2.0, 0.0], vec![0.0, 1.0], vec![1.5, -0.5]];
    p.sensitivity = vec![vec![vec![8.0, 2.0, 0.0]], vec![vec![6.0, 0.0, 0.0]], vec![vec![4.0, 3.0, 0.0]]];
    (p, build_layout(3, 1, 2, 2).unwrap())
}

pub fn synthetic_envelopes(frames: usize, seed: u64) -> EnvelopeMatrix {
    let (p, layout) = synthetic_truth();
    simulate(&p, &layout, frames, SYNTH_FRAME_RATE, &[0.5, 0.3, 0.2], seed)
}
