//! ERB-spaced gammatone filterbank with zero-phase analysis and gain-compensated
//! summation for resynthesis.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::AudioBuffer;
use crate::error::{Error, Result};

pub const DEFAULT_CHANNELS: usize = 16;
pub const DEFAULT_F_LO: f64 = 50.0;
pub const DEFAULT_F_HI: f64 = 7800.0;
/// Order of the combined (forward-backward) gammatone magnitude response.
pub const DEFAULT_FILTER_ORDER: usize = 2;

const GAMMATONE_BW_FACTOR: f64 = 1.019;
const GAIN_GRID_POINTS: usize = 2048;

/// ERB-number (Glasberg & Moore) of a frequency in Hz.
pub fn erb_number(freq: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * freq).log10()
}

pub fn erb_number_to_hz(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.00437
}

/// Equivalent rectangular bandwidth in Hz at `freq`.
pub fn erb_bandwidth(freq: f64) -> f64 {
    24.7 * (0.00437 * freq + 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErbFilterbank {
    pub center_freqs: Vec<f64>,
    pub bandwidths: Vec<f64>,
    pub gains: Vec<f64>,
    pub sample_rate: u32,
    pub filter_order: usize,
}

/// Pole-pair section with a zero at DC: `b0 (1 - z^-1) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b0: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    fn response_sq(&self, omega: f64) -> f64 {
        let re = 1.0 + self.a1 * omega.cos() + self.a2 * (2.0 * omega).cos();
        let im = -self.a1 * omega.sin() - self.a2 * (2.0 * omega).sin();
        let zero = 2.0 - 2.0 * omega.cos();
        self.b0 * self.b0 * zero / (re * re + im * im)
    }

    fn run(&self, data: &mut [f64]) {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in data.iter_mut() {
            let x = *v;
            let y = self.b0 * x + z1;
            z1 = z2 - self.b0 * x - self.a1 * y;
            z2 = -self.a2 * y;
            *v = y;
        }
    }
}

impl ErbFilterbank {
    pub fn channels(&self) -> usize {
        self.center_freqs.len()
    }

    fn sections(&self, m: usize) -> (Biquad, usize) {
        let fs = self.sample_rate as f64;
        let b = GAMMATONE_BW_FACTOR * self.bandwidths[m];
        let r = (-2.0 * PI * b / fs).exp();
        let theta = 2.0 * PI * self.center_freqs[m] / fs;
        let mut bq = Biquad {
            b0: 1.0,
            a1: -2.0 * r * theta.cos(),
            a2: r * r,
        };
        bq.b0 = 1.0 / bq.response_sq(theta).sqrt();
        (bq, self.filter_order / 2)
    }

    /// Zero-phase amplitude response of channel `m` at `freq` Hz, before gain.
    pub fn channel_response(&self, m: usize, freq: f64) -> f64 {
        let (bq, per_pass) = self.sections(m);
        let omega = 2.0 * PI * freq / self.sample_rate as f64;
        // forward-backward squares the one-pass magnitude
        bq.response_sq(omega).powi(per_pass as i32)
    }

    /// Gain-weighted sum of all channel responses at `freq`.
    pub fn summed_response(&self, freq: f64) -> f64 {
        (0..self.channels())
            .map(|m| self.gains[m] * self.channel_response(m, freq))
            .sum()
    }

    /// Zero-phase filtering of one channel.
    pub fn filter_channel(&self, m: usize, signal: &[f64]) -> Vec<f64> {
        let (bq, per_pass) = self.sections(m);
        let mut out = signal.to_vec();
        for _ in 0..per_pass {
            bq.run(&mut out);
        }
        out.reverse();
        for _ in 0..per_pass {
            bq.run(&mut out);
        }
        out.reverse();
        out
    }

    /// Frequency band `[lo, hi]` over which the compensation gains flatten the summed response.
    pub fn flat_band(&self) -> (f64, f64) {
        let lo = 0.6 * self.center_freqs[0];
        let hi = self.center_freqs[self.channels() - 1].min(0.49 * self.sample_rate as f64);
        (lo, hi)
    }

    fn calibrate_gains(&mut self) {
        let m = self.channels();
        let (lo, hi) = self.flat_band();
        let grid: Vec<f64> = (0..GAIN_GRID_POINTS)
            .map(|i| lo + (hi - lo) * i as f64 / (GAIN_GRID_POINTS - 1) as f64)
            .collect();
        let a = DMatrix::from_fn(grid.len(), m, |i, j| self.channel_response(j, grid[i]));
        let ones = DVector::from_element(grid.len(), 1.0);
        let ata = a.transpose() * &a;
        let atb = a.transpose() * ones;
        let gains = ata
            .cholesky()
            .map(|ch| ch.solve(&atb))
            .unwrap_or_else(|| DVector::from_element(m, 1.0));
        let mean_pos = gains.iter().filter(|g| **g > 0.0).sum::<f64>() / m as f64;
        self.gains = gains
            .iter()
            .map(|&g| if g > 0.0 { g } else { 1e-3 * mean_pos.max(1e-3) })
            .collect();
    }
}

/// Designs `channels` gammatone filters spaced uniformly on the ERB-number
/// scale from `f_lo` to `f_hi`, with least-squares compensation gains.
pub fn design_filterbank(f_lo: f64, f_hi: f64, channels: usize, sample_rate: u32) -> Result<ErbFilterbank> {
    design_filterbank_with_order(f_lo, f_hi, channels, sample_rate, DEFAULT_FILTER_ORDER)
}

pub fn design_filterbank_with_order(
    f_lo: f64,
    f_hi: f64,
    channels: usize,
    sample_rate: u32,
    filter_order: usize,
) -> Result<ErbFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(f_lo > 0.0 && f_lo < f_hi && f_hi < nyquist) {
        return Err(Error::invalid(format!(
            "need 0 < f_lo < f_hi < {nyquist} Hz, got f_lo={f_lo}, f_hi={f_hi}"
        )));
    }
    if channels < 2 {
        return Err(Error::invalid(format!("need at least 2 channels, got {channels}")));
    }
    if filter_order == 0 || filter_order % 2 != 0 {
        return Err(Error::invalid(format!("filter order must be a positive even number, got {filter_order}")));
    }
    let (e_lo, e_hi) = (erb_number(f_lo), erb_number(f_hi));
    let step = (e_hi - e_lo) / (channels - 1) as f64;
    let mut center_freqs: Vec<f64> = (0..channels)
        .map(|m| erb_number_to_hz(e_lo + step * m as f64))
        .collect();
    center_freqs[0] = f_lo;
    center_freqs[channels - 1] = f_hi;
    let bandwidths = center_freqs.iter().map(|&f| erb_bandwidth(f)).collect();
    let mut fb = ErbFilterbank {
        center_freqs,
        bandwidths,
        gains: vec![1.0; channels],
        sample_rate,
        filter_order,
    };
    fb.calibrate_gains();
    Ok(fb)
}

/// Band-limited channel signals of one input, together with the bank that produced them.
#[derive(Debug, Clone)]
pub struct SubbandSet {
    pub subbands: Vec<Vec<f64>>,
    pub fb: ErbFilterbank,
}

impl SubbandSet {
    pub fn len(&self) -> usize {
        self.subbands.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn analyze(signal: &AudioBuffer, fb: &ErbFilterbank) -> Result<SubbandSet> {
    if signal.sample_rate != fb.sample_rate {
        return Err(Error::invalid(format!(
            "signal rate {} Hz does not match filterbank rate {} Hz",
            signal.sample_rate, fb.sample_rate
        )));
    }
    let subbands = (0..fb.channels())
        .into_par_iter()
        .map(|m| fb.filter_channel(m, &signal.samples))
        .collect();
    Ok(SubbandSet {
        subbands,
        fb: fb.clone(),
    })
}

/// Applies each channel's compensation gain and sums the channels.
pub fn synthesize(set: &SubbandSet) -> Result<AudioBuffer> {
    if set.subbands.is_empty() {
        return Err(Error::invalid("no subbands to synthesize"));
    }
    if set.subbands.len() != set.fb.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} subbands for a {}-channel filterbank",
            set.subbands.len(),
            set.fb.channels()
        )));
    }
    let n = set.len();
    let mut out = vec![0.0; n];
    for (band, &gain) in set.subbands.iter().zip(&set.fb.gains) {
        if band.len() != n {
            return Err(Error::ShapeMismatch("subbands have unequal lengths".into()));
        }
        for (o, s) in out.iter_mut().zip(band) {
            *o += gain * s;
        }
    }
    AudioBuffer::new(out, set.fb.sample_rate)
}
