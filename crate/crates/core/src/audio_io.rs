//! Audio buffers, WAV files, resampling, and the CSV/JSON persistence used for
//! envelope matrices and models.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Processing rate every input is resampled to on load.
pub const INTERNAL_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio samples"));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Nonnegative M×T matrix of subband envelopes sampled at `frame_rate`.
///
/// `channel_freqs` is either empty (unknown, e.g. after loading a bare CSV)
/// or holds M strictly increasing center frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeMatrix {
    pub values: DMatrix<f64>,
    pub frame_rate: f64,
    pub channel_freqs: Vec<f64>,
}

impl EnvelopeMatrix {
    pub fn new(values: DMatrix<f64>, frame_rate: f64, channel_freqs: Vec<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::invalid("envelope matrix needs at least one channel and one frame"));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::invalid(format!("frame rate must be positive, got {frame_rate}")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("envelope values must be finite and >= 0, found {v}")));
        }
        if !channel_freqs.is_empty() {
            if channel_freqs.len() != values.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "{} channel frequencies for {} channels",
                    channel_freqs.len(),
                    values.nrows()
                )));
            }
            if channel_freqs.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::invalid("channel frequencies must be strictly increasing"));
            }
        }
        Ok(EnvelopeMatrix {
            values,
            frame_rate,
            channel_freqs,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    /// Keeps only the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> EnvelopeMatrix {
        let values = self.values.select_rows(rows.iter());
        let channel_freqs = if self.channel_freqs.is_empty() {
            Vec::new()
        } else {
            rows.iter().map(|&r| self.channel_freqs[r]).collect()
        };
        EnvelopeMatrix {
            values,
            frame_rate: self.frame_rate,
            channel_freqs,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_matrix_csv(path, &self.values, self.frame_rate)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let (values, frame_rate) = read_matrix_csv(path)?;
        EnvelopeMatrix::new(values, frame_rate, Vec::new())
    }
}

/// Reads a PCM-16 or float-32 WAV file and averages its channels to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = hound::WavReader::new(BufReader::new(file))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::UnsupportedFormat("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!("{fmt:?} with {bits} bits per sample")))
        }
    };
    if interleaved.len() < channels {
        return Err(Error::EmptyAudio);
    }
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes a mono float-32 WAV. Values outside [-1, 1] are kept as-is.
pub fn write_wav(buffer: &AudioBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if buffer.is_empty() {
        return Err(Error::EmptyAudio);
    }
    if buffer.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("audio samples"));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = hound::WavWriter::new(BufWriter::new(file), spec)?;
    for &s in &buffer.samples {
        writer.write_sample(s as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

const SINC_ZERO_CROSSINGS: f64 = 32.0;
const KAISER_BETA: f64 = 8.6;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// Taps falling outside the signal are dropped and the remaining weights are
/// renormalized, so constant signals stay constant up to the edges.
pub fn resample(buffer: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::invalid("target rate must be positive"));
    }
    if target_rate == buffer.sample_rate || buffer.is_empty() {
        return AudioBuffer::new(buffer.samples.clone(), target_rate);
    }
    let src = buffer.sample_rate as f64;
    let dst = target_rate as f64;
    let ratio = src / dst;
    let cutoff = (dst / src).min(1.0);
    let half_width = SINC_ZERO_CROSSINGS / cutoff;
    let i0_beta = bessel_i0(KAISER_BETA);
    let n_in = buffer.len() as isize;
    let n_out = ((buffer.len() as f64) * dst / src).round().max(1.0) as usize;

    let samples = (0..n_out)
        .map(|j| {
            let t = j as f64 * ratio;
            let lo = ((t - half_width).ceil() as isize).max(0);
            let hi = ((t + half_width).floor() as isize).min(n_in - 1);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for i in lo..=hi {
                let x = i as f64 - t;
                let arg = cutoff * x;
                let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
                let r = x / half_width;
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                let w = sinc * window;
                acc += w * buffer.samples[i as usize];
                wsum += w;
            }
            if wsum.abs() > 1e-12 {
                acc / wsum
            } else {
                0.0
            }
        })
        .collect();
    AudioBuffer::new(samples, target_rate)
}

/// Writes a matrix as CSV: a `# channels=M frames=T frame_rate=R` header, then one row per channel.
pub fn write_matrix_csv(path: impl AsRef<Path>, values: &DMatrix<f64>, frame_rate: f64) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(
        out,
        "# channels={} frames={} frame_rate={}",
        values.nrows(),
        values.ncols(),
        frame_rate
    )
    .map_err(io)?;
    let mut line = String::new();
    for row in values.row_iter() {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

fn parse_header(path: &Path, header: &str) -> Result<(usize, usize, f64)> {
    let err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg,
    };
    let body = header
        .strip_prefix('#')
        .ok_or_else(|| err("expected header `# channels=M frames=T frame_rate=R`".into()))?;
    let (mut channels, mut frames, mut rate) = (None, None, None);
    for field in body.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(format!("malformed header field `{field}`")))?;
        match key {
            "channels" => channels = value.parse::<usize>().ok(),
            "frames" => frames = value.parse::<usize>().ok(),
            "frame_rate" => rate = value.parse::<f64>().ok(),
            _ => return Err(err(format!("unknown header key `{key}`"))),
        }
    }
    match (channels, frames, rate) {
        (Some(c), Some(f), Some(r)) => Ok((c, f, r)),
        _ => Err(err("header needs numeric channels, frames and frame_rate".into())),
    }
}

/// Reads a matrix CSV written by [`write_matrix_csv`]; returns the matrix and its frame rate.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<(DMatrix<f64>, f64)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "empty file".into(),
        })?
        .map_err(|e| Error::io(path, e))?;
    let (channels, frames, frame_rate) = parse_header(path, header.trim())?;
    let mut data = Vec::with_capacity(channels * frames);
    let mut rows = 0;
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let before = data.len();
        for (col, tok) in line.split(',').enumerate() {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("column {}: `{}` is not a number", col + 1, tok.trim())))?;
            data.push(v);
        }
        if data.len() - before != frames {
            return Err(parse_err(format!("expected {frames} values, found {}", data.len() - before)));
        }
        rows += 1;
    }
    if rows != channels {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: rows + 1,
            msg: format!("expected {channels} rows, found {rows}"),
        });
    }
    Ok((DMatrix::from_row_slice(channels, frames, &data), frame_rate))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
