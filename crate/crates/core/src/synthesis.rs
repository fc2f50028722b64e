//! Sound generation from a trained model: sampled latent forces under a slow
//! shared modulator, envelopes from the forward model, and sinusoid-plus-noise
//! carriers summed through the filterbank.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio_io::{AudioBuffer, EnvelopeMatrix};
use crate::demod::{demodulate, MODULATOR_LENGTHSCALE_MS};
use crate::filterbank::{erb_bandwidth, synthesize, ErbFilterbank, SubbandSet};
use crate::gpssm::{kernel_to_ssm, sample_gp};
use crate::lfm::{LfmDynamics, LfmParams, StateLayout};
use crate::linalg::cholesky_jittered;
use crate::{Error, Result};

/// Largest grid used for the modulator likelihood.
pub const MODULATOR_FIT_POINTS: usize = 500;
/// Largest grid on which a modulator path is drawn before interpolation.
pub const MODULATOR_SAMPLE_POINTS: usize = 2000;
pub const PEAK_LEVEL: f64 = 0.9;
const SINUSOID_WINDOW: f64 = 0.03;
const NUGGET: f64 = 1e-4;
const LENGTHSCALE_GRID: usize = 30;
const GOLDEN_STEPS: usize = 30;

/// Squared-exponential GP on the log of the forces' slow envelope. A sampled
/// modulator path is `exp(mean_offset + f(t))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulatorModel {
    pub se_lengthscale: f64,
    pub se_variance: f64,
    pub mean_offset: f64,
}

impl ModulatorModel {
    /// The modulator that leaves latents untouched.
    pub fn identity() -> Self {
        ModulatorModel {
            se_lengthscale: 1.0,
            se_variance: 0.0,
            mean_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelCarrier {
    pub sinusoid_freq: f64,
    pub sinusoid_power: f64,
    pub noise_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarrierModel {
    pub channels: Vec<ChannelCarrier>,
}

/// Independent 64-bit seed for sub-stream `k` of `seed`.
pub fn sub_seed(seed: u64, k: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k + 1);
    rng.next_u64()
}

fn se_correlation(times: &[f64], lengthscale: f64) -> DMatrix<f64> {
    let n = times.len();
    DMatrix::from_fn(n, n, |i, j| (-0.5 * ((times[i] - times[j]) / lengthscale).powi(2)).exp())
}

/// Profile negative log-likelihood (variance maximized out) and the variance.
fn profile_nll(times: &[f64], y: &DVector<f64>, lengthscale: f64) -> (f64, f64) {
    let n = times.len();
    let k = se_correlation(times, lengthscale) + DMatrix::identity(n, n) * NUGGET;
    let Some((chol, _)) = cholesky_jittered(&k) else {
        return (f64::INFINITY, 0.0);
    };
    let variance = y.dot(&chol.solve(y)) / n as f64;
    let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    (0.5 * n as f64 * variance.max(f64::MIN_POSITIVE).ln() + 0.5 * logdet, variance)
}

/// Maximum-likelihood SE lengthscale for `y` observed at `times`: a log-spaced
/// grid scan followed by golden-section refinement around the best grid point.
pub fn fit_se_lengthscale(times: &[f64], y: &DVector<f64>) -> (f64, f64) {
    let span = times[times.len() - 1] - times[0];
    let spacing = times[1] - times[0];
    let (lo, hi) = ((2.0 * spacing).ln(), span.max(4.0 * spacing).ln());
    let grid: Vec<f64> = (0..LENGTHSCALE_GRID)
        .map(|i| lo + (hi - lo) * i as f64 / (LENGTHSCALE_GRID - 1) as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|l| profile_nll(times, y, l.exp()).0).collect();
    let best = (0..grid.len()).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(grid.len() - 1)];
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..GOLDEN_STEPS {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if profile_nll(times, y, c.exp()).0 < profile_nll(times, y, d.exp()).0 {
            b = d;
        } else {
            a = c;
        }
    }
    let mut l = (0.5 * (a + b)).exp();
    if profile_nll(times, y, l).0 > values[best] {
        l = grid[best].exp();
    }
    (l, profile_nll(times, y, l).1)
}

/// Fits the shared high-level modulator to the posterior latent means (R×T).
pub fn fit_modulator(latent_means: &DMatrix<f64>, frame_rate: f64) -> Result<ModulatorModel> {
    let (r, t) = latent_means.shape();
    if r == 0 || t == 0 {
        return Err(Error::invalid("no latent means to fit a modulator to"));
    }
    if t < 4 {
        return Ok(ModulatorModel::identity());
    }
    let mut envelope = vec![0.0; t];
    for row in latent_means.row_iter() {
        let x: Vec<f64> = row.iter().copied().collect();
        let d = demodulate(&x, MODULATOR_LENGTHSCALE_MS, frame_rate, 1)?;
        for (e, v) in envelope.iter_mut().zip(&d.envelope_full) {
            *e += v / r as f64;
        }
    }
    let log_env: Vec<f64> = envelope.iter().map(|e| e.ln()).collect();
    let log_mean = log_env.iter().sum::<f64>() / t as f64;
    let level = (envelope.iter().sum::<f64>() / t as f64).ln();
    let stride = t.div_ceil(MODULATOR_FIT_POINTS);
    let idx: Vec<usize> = (0..t).step_by(stride).collect();
    let times: Vec<f64> = idx.iter().map(|&i| i as f64 / frame_rate).collect();
    let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| log_env[i] - log_mean));
    // a constant envelope has no variance to model (up to the demodulator's rounding)
    if y.amax() <= 1e-9 * (1.0 + log_mean.abs()) {
        return Ok(ModulatorModel::identity());
    }
    let (se_lengthscale, se_variance) = fit_se_lengthscale(&times, &y);
    Ok(ModulatorModel {
        se_lengthscale,
        se_variance,
        mean_offset: log_mean - level,
    })
}

fn interpolate(grid: &[f64], values: &[f64], at: f64) -> f64 {
    let last = grid.len() - 1;
    if at <= grid[0] {
        return values[0];
    }
    if at >= grid[last] {
        return values[last];
    }
    let i = grid.partition_point(|g| *g <= at) - 1;
    let w = (at - grid[i]) / (grid[i + 1] - grid[i]);
    values[i] + w * (values[i + 1] - values[i])
}

/// One modulator path of `frames` values.
pub fn sample_modulator(model: &ModulatorModel, frames: usize, frame_rate: f64, seed: u64) -> Result<Vec<f64>> {
    if model.se_variance == 0.0 || frames == 1 {
        return Ok(vec![model.mean_offset.exp(); frames]);
    }
    let g = frames.min(MODULATOR_SAMPLE_POINTS);
    let end = (frames - 1) as f64 / frame_rate;
    let grid: Vec<f64> = (0..g).map(|i| end * i as f64 / (g - 1) as f64).collect();
    let k = se_correlation(&grid, model.se_lengthscale) * model.se_variance;
    let (chol, _) = cholesky_jittered(&k).ok_or_else(|| Error::Degenerate("modulator covariance".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_fn(g, |_, _| rng.sample::<f64, _>(StandardNormal));
    let f: Vec<f64> = (chol.l() * z).iter().copied().collect();
    Ok((0..frames)
        .map(|i| (model.mean_offset + interpolate(&grid, &f, i as f64 / frame_rate)).exp())
        .collect())
}

/// Draws R latent forces from their GP priors and multiplies each by one
/// shared modulator path.
pub fn sample_latents(params: &LfmParams, modulator: &ModulatorModel, frames: usize, frame_rate: f64, seed: u64) -> Result<DMatrix<f64>> {
    if frames == 0 {
        return Err(Error::invalid("need at least one frame"));
    }
    let r = params.forces();
    let path = sample_modulator(modulator, frames, frame_rate, sub_seed(seed, r as u64))?;
    let mut out = DMatrix::zeros(r, frames);
    for (i, k) in params.kernels.iter().enumerate() {
        let raw = sample_gp(&kernel_to_ssm(k), 1.0 / frame_rate, frames, sub_seed(seed, i as u64))?;
        for (t, v) in raw.iter().enumerate() {
            out[(i, t)] = v * path[t];
        }
    }
    Ok(out)
}

/// Runs the model forward from `initial` outputs with the latent values
/// replaced by `latents`. Outputs are clamped at zero.
pub fn generate_envelopes(
    params: &LfmParams,
    layout: &StateLayout,
    latents: &DMatrix<f64>,
    frame_rate: f64,
    initial: &[f64],
) -> Result<EnvelopeMatrix> {
    let dyns = LfmDynamics::new(params.clone(), *layout, 1.0 / frame_rate)?;
    let values = dyns.drive(initial, latents)?.map(|v| v.max(0.0));
    EnvelopeMatrix::new(values, frame_rate, Vec::new())
}

fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
            Complex::new(v * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

/// Band edges used for the sinusoid search of channel `m`.
pub fn search_band(fb: &ErbFilterbank, m: usize) -> (f64, f64) {
    let fc = fb.center_freqs[m];
    let half = erb_bandwidth(fc);
    ((fc - half).max(0.0), (fc + half).min(0.5 * fb.sample_rate as f64))
}

/// Per channel: the strongest spectral peak of the carrier inside the band,
/// the power within ±3% of it, and the remaining power.
pub fn fit_carriers(carriers: &[Vec<f64>], fb: &ErbFilterbank) -> Result<CarrierModel> {
    if carriers.len() != fb.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} carriers for a {}-channel filterbank",
            carriers.len(),
            fb.channels()
        )));
    }
    let sr = fb.sample_rate as f64;
    let channels = carriers
        .par_iter()
        .enumerate()
        .map(|(m, c)| {
            let fc = fb.center_freqs[m];
            let mean_square = c.iter().map(|v| v * v).sum::<f64>() / c.len().max(1) as f64;
            if c.len() < 2 || mean_square == 0.0 {
                return ChannelCarrier {
                    sinusoid_freq: fc,
                    sinusoid_power: 0.0,
                    noise_power: 0.0,
                };
            }
            let spec = power_spectrum(c);
            let bin_hz = sr / c.len() as f64;
            let (lo, hi) = search_band(fb, m);
            let bins = (lo / bin_hz).ceil() as usize..=((hi / bin_hz).floor() as usize).min(spec.len() - 1);
            let peak = bins.max_by(|&a, &b| spec[a].total_cmp(&spec[b])).unwrap_or((fc / bin_hz) as usize);
            let f0 = peak as f64 * bin_hz;
            let total: f64 = spec.iter().sum();
            let near: f64 = spec
                .iter()
                .enumerate()
                .filter(|(k, _)| (*k as f64 * bin_hz - f0).abs() <= SINUSOID_WINDOW * f0)
                .map(|(_, p)| p)
                .sum();
            let share = if total > 0.0 { near / total } else { 0.0 };
            ChannelCarrier {
                sinusoid_freq: f0,
                sinusoid_power: share * mean_square,
                noise_power: (1.0 - share) * mean_square,
            }
        })
        .collect();
    Ok(CarrierModel { channels })
}

fn synth_carrier(m: usize, cc: &ChannelCarrier, fb: &ErbFilterbank, n: usize, seed: u64) -> Vec<f64> {
    let total = cc.sinusoid_power + cc.noise_power;
    if total <= 0.0 {
        return vec![0.0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, m as u64));
    let phase = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
    let amp = (2.0 * cc.sinusoid_power / total).sqrt();
    let omega = 2.0 * std::f64::consts::PI * cc.sinusoid_freq / fb.sample_rate as f64;
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let noise = fb.filter_channel(m, &white);
    let rms = (noise.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let noise_gain = if rms > 0.0 { (cc.noise_power / total).sqrt() / rms } else { 0.0 };
    (0..n)
        .map(|i| amp * (omega * i as f64 + phase).sin() + noise_gain * noise[i])
        .collect()
}

/// Renders envelopes to audio: each envelope, linearly upsampled, modulates a
/// unit-RMS carrier; channels are summed and the result peak-normalized.
pub fn render(envelopes: &EnvelopeMatrix, cm: &CarrierModel, fb: &ErbFilterbank, seed: u64) -> Result<AudioBuffer> {
    let m = envelopes.channels();
    if m != fb.channels() || m != cm.channels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{m} envelopes, {} carriers, {}-channel filterbank",
            cm.channels.len(),
            fb.channels()
        )));
    }
    let sr = fb.sample_rate as f64;
    let t = envelopes.frames();
    let n = ((t as f64) * sr / envelopes.frame_rate).round().max(1.0) as usize;
    let frame_times: Vec<f64> = (0..t).map(|k| k as f64 / envelopes.frame_rate).collect();
    let subbands = (0..m)
        .into_par_iter()
        .map(|ch| {
            let env: Vec<f64> = envelopes.values.row(ch).iter().copied().collect();
            let carrier = synth_carrier(ch, &cm.channels[ch], fb, n, seed);
            carrier
                .iter()
                .enumerate()
                .map(|(i, c)| c * interpolate(&frame_times, &env, i as f64 / sr))
                .collect()
        })
        .collect();
    let mut out = synthesize(&SubbandSet {
        subbands,
        fb: fb.clone(),
    })?;
    let peak = out.peak();
    if peak > 0.0 {
        out.samples.iter_mut().for_each(|s| *s *= PEAK_LEVEL / peak);
    }
    Ok(out)
}
