//! NMF and temporally smoothed NMF on envelope matrices, plus the
//! reconstruction metrics used to compare them with the latent force model.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_io::EnvelopeMatrix;
use crate::{Error, Result};

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmfFactors {
    pub w: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub objective_trace: Vec<f64>,
}

impl NmfFactors {
    pub fn reconstruction(&self) -> DMatrix<f64> {
        &self.w * &self.h
    }
}

fn init_factors(m: usize, k: usize, t: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // uniform on (0, 1]
    let mut draw = || 1.0 - rng.random::<f64>();
    let w = DMatrix::from_fn(m, k, |_, _| draw());
    let h = DMatrix::from_fn(k, t, |_, _| draw());
    (w, h)
}

fn check_rank(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("factorization rank must be at least 1"));
    }
    Ok(())
}

fn squared_error(v: &DMatrix<f64>, w: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    (v - w * h).norm_squared()
}

/// Sum over rows of the squared first differences along time.
pub fn roughness(h: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for k in 0..h.nrows() {
        for t in 1..h.ncols() {
            total += (h[(k, t)] - h[(k, t - 1)]).powi(2);
        }
    }
    total
}

/// Total variation of one activation row.
pub fn total_variation(row: &[f64]) -> f64 {
    row.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

fn update_w(v: &DMatrix<f64>, w: &mut DMatrix<f64>, h: &DMatrix<f64>) {
    let num = v * h.transpose();
    let den = &*w * (h * h.transpose());
    w.zip_zip_apply(&num, &den, |x, n, d| *x *= n / (d + EPS));
}

/// Euclidean NMF by multiplicative updates.
pub fn nmf(v: &EnvelopeMatrix, k: usize, iters: usize, seed: u64) -> Result<NmfFactors> {
    check_rank(k)?;
    let v = &v.values;
    let (mut w, mut h) = init_factors(v.nrows(), k, v.ncols(), seed);
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        update_w(v, &mut w, &h);
        let num = w.transpose() * v;
        let den = (w.transpose() * &w) * &h;
        h.zip_zip_apply(&num, &den, |x, n, d| *x *= n / (d + EPS));
        debug_assert!(w.iter().chain(h.iter()).all(|x| *x >= 0.0));
        trace.push(squared_error(v, &w, &h));
    }
    Ok(NmfFactors {
        w,
        h,
        objective_trace: trace,
    })
}

/// NMF with a squared-difference smoothness penalty on the activations.
///
/// Minimizes ‖V − WH‖² + β Σ (H[k,t] − H[k,t−1])². The penalty gradient is
/// split into its positive part (own value times neighbour count) and its
/// negative part (sum of neighbours), which go to the denominator and
/// numerator of the H update respectively.
pub fn tnmf(v: &EnvelopeMatrix, k: usize, iters: usize, beta: f64, seed: u64) -> Result<NmfFactors> {
    check_rank(k)?;
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("smoothness weight must be finite and >= 0, got {beta}")));
    }
    let v = &v.values;
    let t = v.ncols();
    let (mut w, mut h) = init_factors(v.nrows(), k, t, seed);
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        update_w(v, &mut w, &h);
        let num = w.transpose() * v;
        let den = (w.transpose() * &w) * &h;
        let prev = h.clone();
        for j in 0..t {
            let neighbours = (j > 0) as u8 as f64 + (j + 1 < t) as u8 as f64;
            for r in 0..k {
                let left = if j > 0 { prev[(r, j - 1)] } else { 0.0 };
                let right = if j + 1 < t { prev[(r, j + 1)] } else { 0.0 };
                let n = num[(r, j)] + beta * (left + right);
                let d = den[(r, j)] + beta * neighbours * prev[(r, j)];
                h[(r, j)] = prev[(r, j)] * (n / (d + EPS));
            }
        }
        debug_assert!(w.iter().chain(h.iter()).all(|x| *x >= 0.0));
        trace.push(squared_error(v, &w, &h) + beta * roughness(&h));
    }
    Ok(NmfFactors {
        w,
        h,
        objective_trace: trace,
    })
}

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn rms_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    same_shape(a, b)?;
    if a.is_empty() {
        return Err(Error::invalid("rms of an empty matrix"));
    }
    Ok(((a - b).norm_squared() / a.len() as f64).sqrt())
}

pub fn cosine_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let (na, nb) = (a.norm_squared(), b.norm_squared());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine distance of a zero matrix".into()));
    }
    // one square root of the product keeps parallel inputs at exactly zero
    Ok((1.0 - a.dot(b) / (na * nb).sqrt()).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rms: f64,
    pub cosine: f64,
}

impl Metrics {
    pub fn between(reference: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<Self> {
        Ok(Metrics {
            rms: rms_error(reference, estimate)?,
            cosine: cosine_distance(reference, estimate)?,
        })
    }

    fn get(&self, metric: &str) -> f64 {
        match metric {
            "rms" => self.rms,
            _ => self.cosine,
        }
    }
}

pub const METHODS: [&str; 3] = ["lfm", "tnmf", "nmf"];
pub const METRICS: [&str; 2] = ["rms", "cosine"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundMetrics {
    pub sound: String,
    pub lfm: Metrics,
    pub tnmf: Metrics,
    pub nmf: Metrics,
}

impl SoundMetrics {
    fn method(&self, name: &str) -> &Metrics {
        match name {
            "lfm" => &self.lfm,
            "tnmf" => &self.tnmf,
            _ => &self.nmf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sound: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
    /// value divided by the NMF value for the same sound and metric
    pub relative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub metric: String,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub sounds: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RelativeReport {
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
    /// (sound, reason) for every sound left out of the summary
    pub excluded: Vec<(String, String)>,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn relative_report(sounds: &[SoundMetrics]) -> RelativeReport {
    let mut report = RelativeReport::default();
    let mut flagged = vec![false; sounds.len()];
    for (i, s) in sounds.iter().enumerate() {
        for metric in METRICS {
            let base = s.nmf.get(metric);
            let usable = base != 0.0 && base.is_finite();
            if !usable && !flagged[i] {
                flagged[i] = true;
                report.excluded.push((s.sound.clone(), format!("NMF {metric} is {base}")));
            }
            for method in METHODS {
                let value = s.method(method).get(metric);
                report.rows.push(ReportRow {
                    sound: s.sound.clone(),
                    method: method.into(),
                    metric: metric.into(),
                    value,
                    relative: usable.then(|| value / base),
                });
            }
        }
    }
    for method in METHODS {
        for metric in METRICS {
            let mut ratios: Vec<f64> = sounds
                .iter()
                .zip(&flagged)
                .filter(|(_, f)| !**f)
                .map(|(s, _)| s.method(method).get(metric) / s.nmf.get(metric))
                .collect();
            if ratios.is_empty() {
                continue;
            }
            ratios.sort_by(f64::total_cmp);
            report.summary.push(SummaryRow {
                method: method.into(),
                metric: metric.into(),
                q1: quantile(&ratios, 0.25),
                median: quantile(&ratios, 0.5),
                q3: quantile(&ratios, 0.75),
                sounds: ratios.len(),
            });
        }
    }
    report
}

impl RelativeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sound,method,metric,value,relative\n");
        for r in &self.rows {
            let rel = r.relative.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.sound, r.method, r.metric, r.value, rel);
        }
        for s in &self.summary {
            let _ = writeln!(out, "summary:q1,{},{},,{}", s.method, s.metric, s.q1);
            let _ = writeln!(out, "summary:median,{},{},,{}", s.method, s.metric, s.median);
            let _ = writeln!(out, "summary:q3,{},{},,{}", s.method, s.metric, s.q3);
        }
        for (sound, reason) in &self.excluded {
            let _ = writeln!(out, "excluded:{sound},,,,{reason}");
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<6} {:<7} {:>9} {:>9} {:>9} {:>7}\n", "method", "metric", "q1", "median", "q3", "sounds");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{:<6} {:<7} {:>9.4} {:>9.4} {:>9.4} {:>7}",
                s.method, s.metric, s.q1, s.median, s.q3, s.sounds
            );
        }
        for (sound, reason) in &self.excluded {
            let _ = writeln!(out, "excluded {sound}: {reason}");
        }
        out
    }
}
