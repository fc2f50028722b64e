//! Amplitude demodulation: a slow positive envelope and a fast carrier per subband.
//!
//! The envelope is the log-domain Gaussian smoothing of the analytic-signal
//! magnitude, so the lengthscale directly sets the slowest modulation kept in the
//! carrier.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const DEFAULT_LENGTHSCALE_MS: f64 = 20.0;
pub const MODULATOR_LENGTHSCALE_MS: f64 = 200.0;
pub const DEFAULT_DECIMATION: usize = 10;
pub const MIN_LENGTHSCALE_MS: f64 = 10.0;

const RELATIVE_FLOOR: f64 = 1e-5;
const ABSOLUTE_FLOOR: f64 = 1e-8;
const KERNEL_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DemodResult {
    /// Envelope on the decimated frame grid.
    pub envelope: Vec<f64>,
    /// Envelope at the input rate; `envelope_full[i] * carrier[i]` reproduces the input.
    pub envelope_full: Vec<f64>,
    pub carrier: Vec<f64>,
    pub lengthscale_ms: f64,
    pub floor: f64,
}

/// Number of envelope frames for `n_samples` input samples.
pub fn envelope_frame_grid(n_samples: usize, decimation: usize) -> usize {
    n_samples.div_ceil(decimation.max(1))
}

fn fft_convolve_same(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let half = kernel.len() / 2;
    let len = x.len() + kernel.len() - 1;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(len, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = kernel.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(len, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    inv.process(&mut a);
    let scale = 1.0 / len as f64;
    a[half..half + x.len()].iter().map(|c| c.re * scale).collect()
}

/// Zero-phase Gaussian smoothing with standard deviation `sigma` samples.
/// Weights are renormalized near the edges so constants are preserved.
pub fn gaussian_smooth(x: &[f64], sigma: f64) -> Vec<f64> {
    if x.is_empty() || sigma <= 0.0 {
        return x.to_vec();
    }
    let half = (KERNEL_SIGMAS * sigma).ceil().max(1.0) as usize;
    let kernel: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let t = i as f64 - half as f64;
            (-0.5 * t * t / (sigma * sigma)).exp()
        })
        .collect();
    let ones = vec![1.0; x.len()];
    if half <= 32 {
        let direct = |sig: &[f64]| -> Vec<f64> {
            (0..sig.len())
                .map(|i| {
                    let lo = i.saturating_sub(half);
                    let hi = (i + half).min(sig.len() - 1);
                    (lo..=hi).map(|j| sig[j] * kernel[j + half - i]).sum()
                })
                .collect()
        };
        let num = direct(x);
        let den = direct(&ones);
        return num.iter().zip(&den).map(|(n, d)| n / d).collect();
    }
    let num = fft_convolve_same(x, &kernel);
    let den = fft_convolve_same(&ones, &kernel);
    num.iter().zip(&den).map(|(n, d)| n / d).collect()
}

/// Magnitude of the analytic signal of `x`.
pub fn analytic_magnitude(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    // keep DC (and Nyquist for even n), double positive frequencies, drop negative ones
    let positive_end = n.div_ceil(2);
    for (k, v) in buf.iter_mut().enumerate() {
        if k == 0 || (n % 2 == 0 && k == n / 2) {
            continue;
        }
        if k < positive_end {
            *v *= 2.0;
        } else {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.norm() / n as f64).collect()
}

/// Splits `subband` into a smooth positive envelope and a carrier.
///
/// `sample_rate` is the rate of `subband`; the returned `envelope` keeps every
/// `decimation`-th sample of the full-rate envelope.
pub fn demodulate(subband: &[f64], lengthscale_ms: f64, sample_rate: f64, decimation: usize) -> Result<DemodResult> {
    if subband.is_empty() {
        return Err(Error::invalid("cannot demodulate an empty signal"));
    }
    if !(lengthscale_ms >= MIN_LENGTHSCALE_MS) {
        return Err(Error::invalid(format!(
            "demodulation lengthscale must be >= {MIN_LENGTHSCALE_MS} ms, got {lengthscale_ms}"
        )));
    }
    if !(sample_rate > 0.0) || decimation == 0 {
        return Err(Error::invalid("sample rate and decimation must be positive"));
    }
    if subband.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("subband"));
    }
    let peak = subband.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (RELATIVE_FLOOR * peak).max(ABSOLUTE_FLOOR);
    let log_mag: Vec<f64> = analytic_magnitude(subband)
        .iter()
        .map(|a| (a + floor).ln())
        .collect();
    let sigma = lengthscale_ms * 1e-3 * sample_rate;
    let envelope_full: Vec<f64> = gaussian_smooth(&log_mag, sigma)
        .iter()
        .map(|s| s.exp().max(floor))
        .collect();
    let carrier = subband
        .iter()
        .zip(&envelope_full)
        .map(|(x, e)| x / e)
        .collect();
    let envelope = envelope_full.iter().step_by(decimation).copied().collect();
    Ok(DemodResult {
        envelope,
        envelope_full,
        carrier,
        lengthscale_ms,
        floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    const FS: f64 = 16_000.0;

    fn total_variation(x: &[f64]) -> f64 {
        x.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
    }

    #[test]
    fn frame_grid() {
        assert_eq!(envelope_frame_grid(1000, 10), 100);
        assert_eq!(envelope_frame_grid(1001, 10), 101);
        assert_eq!(envelope_frame_grid(88_200, 10), 8820);
    }

    #[test]
    fn constant_input_is_a_fixed_point() {
        let a = 0.37;
        let r = demodulate(&vec![a; 4000], 20.0, FS, 10).unwrap();
        assert!(r.envelope_full.iter().all(|e| (e / a - 1.0).abs() < 0.01));
        assert!(r.carrier.iter().all(|c| (c.abs() - 1.0).abs() < 0.01));
        assert_eq!(r.envelope.len(), 400);
    }

    #[test]
    fn recovers_slow_am_modulator() {
        let n = 32_000;
        let modulator: Vec<f64> = (0..n)
            .map(|i| 1.0 + 0.5 * (2.0 * PI * 2.0 * i as f64 / FS).sin())
            .collect();
        let x: Vec<f64> = modulator
            .iter()
            .enumerate()
            .map(|(i, m)| m * (2.0 * PI * 1000.0 * i as f64 / FS).sin())
            .collect();
        let r = demodulate(&x, 20.0, FS, 10).unwrap();
        // ignore the first and last 50 ms
        let range = 800..n - 800;
        let err: f64 = range.clone().map(|i| (r.envelope_full[i] - modulator[i]).powi(2)).sum();
        let norm: f64 = range.map(|i| modulator[i].powi(2)).sum();
        let nrmse = (err / norm).sqrt();
        assert!(nrmse < 0.05, "normalized rms error {nrmse}");
    }

    #[test]
    fn zero_signal_hits_the_floor() {
        let r = demodulate(&vec![0.0; 500], 20.0, FS, 10).unwrap();
        assert!(r.envelope_full.iter().all(|e| (e / r.floor - 1.0).abs() < 1e-12));
        assert_eq!(r.floor, 1e-8);
        assert!(r.carrier.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn reconstruction_identity_and_positivity() {
        let x: Vec<f64> = (0..5000)
            .map(|i| (i as f64 * 0.37).sin() * (1.0 + (i as f64 * 0.001).cos()) * if i > 3000 { 1e-3 } else { 1.0 })
            .collect();
        let r = demodulate(&x, 15.0, FS, 10).unwrap();
        for i in 0..x.len() {
            let back = r.envelope_full[i] * r.carrier[i];
            assert!((back - x[i]).abs() <= 1e-12 * x[i].abs().max(1e-300) + 1e-300);
            assert!(r.envelope_full[i] >= r.floor);
        }
    }

    #[test]
    fn envelope_is_smooth() {
        let x: Vec<f64> = (0..16_000)
            .map(|i| {
                let t = i as f64 / FS;
                (2.0 * PI * 700.0 * t).sin() * (-4.0 * (t % 0.25)).exp()
            })
            .collect();
        let lengthscale_ms = 20.0;
        let decimation = 10;
        let r = demodulate(&x, lengthscale_ms, FS, decimation).unwrap();
        let period_ms = 1e3 * decimation as f64 / FS;
        let max_env = r.envelope.iter().fold(0.0_f64, |a, b| a.max(*b));
        let bound = period_ms / lengthscale_ms * max_env * 3.0;
        for w in r.envelope.windows(2) {
            assert!((w[1] - w[0]).abs() <= bound);
        }
    }

    #[test]
    fn longer_lengthscales_do_not_add_variation() {
        let x: Vec<f64> = (0..24_000)
            .map(|i| {
                let t = i as f64 / FS;
                (2.0 * PI * 440.0 * t).sin() * (1.2 + (2.0 * PI * 3.0 * t).sin() + 0.5 * (2.0 * PI * 11.0 * t).sin()).abs()
            })
            .collect();
        let tv: Vec<f64> = [10.0, 40.0, 160.0]
            .iter()
            .map(|&l| total_variation(&demodulate(&x, l, FS, 10).unwrap().envelope))
            .collect();
        assert!(tv[0] >= tv[1] && tv[1] >= tv[2], "{tv:?}");
    }

    #[test]
    fn preconditions() {
        assert!(demodulate(&[], 20.0, FS, 10).is_err());
        assert!(demodulate(&[1.0], 5.0, FS, 10).is_err());
    }

    #[test]
    fn fft_convolution_matches_direct_sum() {
        let x: Vec<f64> = (0..400).map(|i| ((i * 31) % 17) as f64).collect();
        let kernel: Vec<f64> = (0..81).map(|i| 1.0 / (1.0 + (i as f64 - 40.0).powi(2))).collect();
        let fast = fft_convolve_same(&x, &kernel);
        for i in 0..x.len() {
            let direct: f64 = (0..kernel.len())
                .filter_map(|k| {
                    let j = i as isize + k as isize - 40;
                    (0..x.len() as isize).contains(&j).then(|| x[j as usize] * kernel[k])
                })
                .sum();
            assert!((fast[i] - direct).abs() < 1e-9);
        }
    }
}
