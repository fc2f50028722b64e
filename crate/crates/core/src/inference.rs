//! Cubature Kalman filtering and RTS smoothing for the augmented LFM.
//!
//! Prediction pushes 2n cubature points through the nonlinear transition; the
//! measurement picks state entries directly, so the update is an ordinary
//! linear Kalman update.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::audio_io::EnvelopeMatrix;
use crate::error::{Error, Result};
use crate::lfm::{GaussianState, LfmDynamics, LfmParams, StateLayout};
use crate::linalg::{cholesky_jittered, max_asymmetry, psd_cholesky, symmetrize};

const PARALLEL_DIM: usize = 48;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Discrete-time model with linear selector measurements `y = x[observed] + noise`.
pub trait StateSpaceModel: Sync {
    fn state_dim(&self) -> usize;
    fn observed(&self) -> &[usize];
    /// Variance of the i.i.d. measurement noise.
    fn obs_noise(&self) -> f64;
    fn transition(&self, x: &DVector<f64>) -> DVector<f64>;
    fn transition_into(&self, x: &[f64], next: &mut [f64]) {
        next.copy_from_slice(self.transition(&DVector::from_column_slice(x)).as_slice());
    }
    fn process_noise(&self) -> &DMatrix<f64>;
}

impl StateSpaceModel for LfmDynamics {
    fn state_dim(&self) -> usize {
        self.layout.n()
    }
    fn observed(&self) -> &[usize] {
        LfmDynamics::observed(self)
    }
    fn obs_noise(&self) -> f64 {
        self.params.sigma2
    }
    fn transition(&self, x: &DVector<f64>) -> DVector<f64> {
        LfmDynamics::transition(self, x)
    }
    fn transition_into(&self, x: &[f64], next: &mut [f64]) {
        LfmDynamics::transition_into(self, x, next)
    }
    fn process_noise(&self) -> &DMatrix<f64> {
        LfmDynamics::process_noise(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Innovation {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FilterResult {
    pub filtered: Vec<GaussianState>,
    pub predicted: Vec<GaussianState>,
    pub loglik: f64,
    /// `None` on skipped steps.
    pub innovations: Vec<Option<Innovation>>,
    /// Order in which the channels were filtered (position → caller's channel).
    /// Empty when the caller's order was used as is.
    pub channel_order: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SmoothResult {
    pub smoothed: Vec<GaussianState>,
}

impl SmoothResult {
    /// Means of the selected state entries, one row per index.
    pub fn mean_rows(&self, indices: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(indices.len(), self.smoothed.len(), |i, k| self.smoothed[k].mean[indices[i]])
    }
}

/// Unit cubature points as columns (`+√n·e_i` then `−√n·e_i`) and their weights.
pub fn cubature_points(n: usize) -> (DMatrix<f64>, Vec<f64>) {
    let s = (n as f64).sqrt();
    let mut pts = DMatrix::zeros(n, 2 * n);
    for i in 0..n {
        pts[(i, i)] = s;
        pts[(i, n + i)] = -s;
    }
    (pts, vec![1.0 / (2 * n) as f64; 2 * n])
}

struct Propagated {
    predicted: GaussianState,
    /// Cross-covariance between the source state and the predicted state.
    cross: Option<DMatrix<f64>>,
}

fn predict<S: StateSpaceModel + ?Sized>(model: &S, state: &GaussianState, want_cross: bool, step: usize) -> Result<Propagated> {
    let n = state.mean.len();
    let root = psd_cholesky(&state.cov).ok_or(Error::Divergence { step })? * (n as f64).sqrt();
    let mut points = DMatrix::zeros(n, 2 * n);
    for j in 0..n {
        for i in 0..n {
            points[(i, j)] = state.mean[i] + root[(i, j)];
            points[(i, n + j)] = state.mean[i] - root[(i, j)];
        }
    }
    let mut images = DMatrix::zeros(n, 2 * n);
    let src = points.as_slice();
    if n >= PARALLEL_DIM {
        images
            .as_mut_slice()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(j, out)| model.transition_into(&src[j * n..(j + 1) * n], out));
    } else {
        for (j, out) in images.as_mut_slice().chunks_mut(n).enumerate() {
            model.transition_into(&src[j * n..(j + 1) * n], out);
        }
    }
    if images.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step });
    }
    let w = 1.0 / (2 * n) as f64;
    let mean = images.column_mean();
    for mut col in images.column_iter_mut() {
        col -= &mean;
    }
    let mut cov = model.process_noise().clone();
    cov.gemm(w, &images, &images.transpose(), 1.0);
    symmetrize(&mut cov);
    let cross = want_cross.then(|| {
        // source deviations are +root then -root
        let half = images.columns(0, n) - images.columns(n, n);
        &root * half.transpose() * w
    });
    Ok(Propagated {
        predicted: GaussianState { mean, cov },
        cross,
    })
}

/// Linear update; returns the posterior, the innovation and its log density.
fn update<S: StateSpaceModel + ?Sized>(model: &S, prior: &GaussianState, y: &[f64], step: usize) -> Result<(GaussianState, Innovation, f64)> {
    let idx = model.observed();
    let m = idx.len();
    let ph = prior.cov.select_columns(idx);
    let mut s = ph.select_rows(idx);
    for i in 0..m {
        s[(i, i)] += model.obs_noise();
    }
    symmetrize(&mut s);
    let v = DVector::from_fn(m, |i, _| y[i] - prior.mean[idx[i]]);
    let (chol, _) = cholesky_jittered(&s).ok_or(Error::Divergence { step })?;
    // K = P·Hᵀ·S⁻¹, computed as (S⁻¹·H·P)ᵀ
    let gain = chol.solve(&ph.transpose()).transpose();
    let mean = &prior.mean + &gain * &v;
    let mut cov = &prior.cov - &gain * ph.transpose();
    symmetrize(&mut cov);
    let l = chol.l();
    let log_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let maha = v.dot(&chol.solve(&v));
    let ll = -0.5 * (m as f64 * LN_2PI + log_det + maha);
    if !ll.is_finite() || mean.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence { step });
    }
    debug_assert!(max_asymmetry(&cov) < 1e-9);
    Ok((GaussianState { mean, cov }, Innovation { mean: v, cov: s }, ll))
}

fn check_inputs<S: StateSpaceModel + ?Sized>(model: &S, obs: &DMatrix<f64>, initial: &GaussianState, skip: &[bool]) -> Result<()> {
    let n = model.state_dim();
    if obs.nrows() != model.observed().len() {
        return Err(Error::ShapeMismatch(format!(
            "{} observation rows for {} observed states",
            obs.nrows(),
            model.observed().len()
        )));
    }
    if skip.len() != obs.ncols() {
        return Err(Error::ShapeMismatch(format!("skip mask has {} entries for {} frames", skip.len(), obs.ncols())));
    }
    if initial.mean.len() != n || initial.cov.shape() != (n, n) {
        return Err(Error::ShapeMismatch("initial state does not match the state dimension".into()));
    }
    if obs.ncols() == 0 {
        return Err(Error::invalid("no observations to filter"));
    }
    Ok(())
}

fn run_filter<S: StateSpaceModel + ?Sized>(
    model: &S,
    obs: &DMatrix<f64>,
    initial: &GaussianState,
    skip: &[bool],
    mut record: impl FnMut(&GaussianState, &GaussianState, Option<Innovation>),
) -> Result<f64> {
    check_inputs(model, obs, initial, skip)?;
    let mut loglik = 0.0;
    let mut current = initial.clone();
    let mut y = vec![0.0; obs.nrows()];
    for k in 0..obs.ncols() {
        let prior = if k == 0 {
            current
        } else {
            predict(model, &current, false, k)?.predicted
        };
        if skip[k] {
            record(&prior, &prior, None);
            current = prior;
        } else {
            for (i, v) in y.iter_mut().enumerate() {
                *v = obs[(i, k)];
            }
            let (post, innov, ll) = update(model, &prior, &y, k)?;
            loglik += ll;
            record(&prior, &post, Some(innov));
            current = post;
        }
    }
    Ok(loglik)
}

/// Cubature Kalman filter over the columns of `obs`.
pub fn filter_model<S: StateSpaceModel + ?Sized>(model: &S, obs: &DMatrix<f64>, initial: &GaussianState, skip: &[bool]) -> Result<FilterResult> {
    let t = obs.ncols();
    let mut filtered = Vec::with_capacity(t);
    let mut predicted = Vec::with_capacity(t);
    let mut innovations = Vec::with_capacity(t);
    let loglik = run_filter(model, obs, initial, skip, |p, f, i| {
        predicted.push(p.clone());
        filtered.push(f.clone());
        innovations.push(i);
    })?;
    Ok(FilterResult {
        filtered,
        predicted,
        loglik,
        innovations,
        channel_order: Vec::new(),
    })
}

/// Log-likelihood only, without keeping the per-step states.
pub fn loglik_model<S: StateSpaceModel + ?Sized>(model: &S, obs: &DMatrix<f64>, initial: &GaussianState, skip: &[bool]) -> Result<f64> {
    run_filter(model, obs, initial, skip, |_, _, _| {})
}

/// Cubature RTS smoother.
pub fn smooth_model<S: StateSpaceModel + ?Sized>(model: &S, fr: &FilterResult) -> Result<SmoothResult> {
    let t = fr.filtered.len();
    if t == 0 || fr.predicted.len() != t {
        return Err(Error::invalid("filter result is empty or inconsistent"));
    }
    let mut smoothed = vec![fr.filtered[t - 1].clone(); t];
    for k in (0..t - 1).rev() {
        let filt = &fr.filtered[k];
        let prop = predict(model, filt, true, k + 1)?;
        let cross = prop.cross.expect("cross-covariance requested");
        let pred = &fr.predicted[k + 1];
        let (chol, _) = cholesky_jittered(&pred.cov).ok_or(Error::Divergence { step: k + 1 })?;
        // G = C·P⁻¹, via P symmetric
        let gain = chol.solve(&cross.transpose()).transpose();
        let next = &smoothed[k + 1];
        let mean = &filt.mean + &gain * (&next.mean - &pred.mean);
        let mut cov = &filt.cov + &gain * (&next.cov - &pred.cov) * gain.transpose();
        symmetrize(&mut cov);
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k });
        }
        smoothed[k] = GaussianState { mean, cov };
    }
    Ok(SmoothResult { smoothed })
}

/// Channel order used internally by the LFM filter: by descending energy,
/// then by the envelope values, then by the channel parameters. The order
/// depends only on what each channel holds, so permuting the caller's
/// channels leaves the computation, and its rounding, unchanged.
pub fn canonical_channel_order(observations: &EnvelopeMatrix, params: &LfmParams) -> Vec<usize> {
    let v = &observations.values;
    let energy: Vec<f64> = (0..v.nrows()).map(|m| v.row(m).iter().map(|x| x * x).sum()).collect();
    let param_key = |m: usize| -> Vec<f64> {
        let mut key = vec![params.damping[m], params.gamma[m]];
        key.extend(&params.feedback[m]);
        key.extend(params.sensitivity[m].iter().flatten());
        key
    };
    let lexi = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    let mut order: Vec<usize> = (0..v.nrows()).collect();
    order.sort_by(|&a, &b| {
        energy[b]
            .total_cmp(&energy[a])
            .then_with(|| {
                let (ra, rb): (Vec<f64>, Vec<f64>) = (v.row(a).iter().copied().collect(), v.row(b).iter().copied().collect());
                lexi(&ra, &rb)
            })
            .then_with(|| lexi(&param_key(a), &param_key(b)))
            .then(a.cmp(&b))
    });
    order
}

/// State indices of the canonical layout in terms of the caller's layout.
fn state_order(layout: &StateLayout, channels: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..layout.n()).collect();
    for (pos, &ch) in channels.iter().enumerate() {
        idx[pos] = ch;
        for lag in 1..=layout.p {
            idx[layout.output_history(lag, pos)] = layout.output_history(lag, ch);
        }
    }
    idx
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn select_state(state: &GaussianState, idx: &[usize]) -> GaussianState {
    GaussianState {
        mean: state.mean.select_rows(idx),
        cov: DMatrix::from_fn(idx.len(), idx.len(), |i, j| state.cov[(idx[i], idx[j])]),
    }
}

fn lfm_setup(observations: &EnvelopeMatrix, params: &LfmParams, layout: &StateLayout) -> Result<(LfmDynamics, GaussianState, DMatrix<f64>, Vec<usize>)> {
    if observations.channels() != layout.m {
        return Err(Error::ShapeMismatch(format!(
            "{} envelope channels for a layout with M={}",
            observations.channels(),
            layout.m
        )));
    }
    if !layout.matches(params) {
        return Err(Error::ShapeMismatch("layout does not fit the parameters".into()));
    }
    let order = canonical_channel_order(observations, params);
    let obs = observations.values.select_rows(&order);
    let dynamics = LfmDynamics::new(params.select_channels(&order), *layout, 1.0 / observations.frame_rate)?;
    let first: Vec<f64> = obs.column(0).iter().copied().collect();
    let initial = dynamics.initial_state(&first);
    Ok((dynamics, initial, obs, order))
}

/// Filters the envelopes; states and innovations come back in the caller's
/// channel order.
pub fn ckf_filter(observations: &EnvelopeMatrix, params: &LfmParams, layout: &StateLayout, skip_mask: &[bool]) -> Result<FilterResult> {
    let (dynamics, initial, obs, order) = lfm_setup(observations, params, layout)?;
    let mut fr = filter_model(&dynamics, &obs, &initial, skip_mask)?;
    let back = inverse(&state_order(layout, &order));
    let channel_back = inverse(&order);
    for st in fr.filtered.iter_mut().chain(fr.predicted.iter_mut()) {
        *st = select_state(st, &back);
    }
    for inn in fr.innovations.iter_mut().flatten() {
        inn.mean = inn.mean.select_rows(&channel_back);
        inn.cov = DMatrix::from_fn(layout.m, layout.m, |i, j| inn.cov[(channel_back[i], channel_back[j])]);
    }
    fr.channel_order = order;
    Ok(fr)
}

/// Smooths a result of [`ckf_filter`], reusing its channel order so the
/// cubature points match the forward pass.
pub fn rts_smooth(fr: &FilterResult, params: &LfmParams, layout: &StateLayout, frame_rate: f64) -> Result<SmoothResult> {
    let order: Vec<usize> = if fr.channel_order.is_empty() {
        (0..layout.m).collect()
    } else {
        fr.channel_order.clone()
    };
    if order.len() != layout.m {
        return Err(Error::ShapeMismatch("filter result was produced for a different channel count".into()));
    }
    let dynamics = LfmDynamics::new(params.select_channels(&order), *layout, 1.0 / frame_rate)?;
    let fwd = state_order(layout, &order);
    let canonical = FilterResult {
        filtered: fr.filtered.iter().map(|s| select_state(s, &fwd)).collect(),
        predicted: fr.predicted.iter().map(|s| select_state(s, &fwd)).collect(),
        loglik: fr.loglik,
        innovations: Vec::new(),
        channel_order: Vec::new(),
    };
    let back = inverse(&fwd);
    let sr = smooth_model(&dynamics, &canonical)?;
    Ok(SmoothResult {
        smoothed: sr.smoothed.iter().map(|s| select_state(s, &back)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoglikOutcome {
    /// `-inf` when the filter diverged.
    pub loglik: f64,
    pub diverged_at: Option<usize>,
}

/// Marginal log-likelihood; divergence is reported rather than raised.
/// Shape and parameter errors are still returned as errors.
pub fn marginal_loglik(observations: &EnvelopeMatrix, params: &LfmParams, layout: &StateLayout, skip_mask: &[bool]) -> Result<LoglikOutcome> {
    let (dynamics, initial, obs, _) = lfm_setup(observations, params, layout)?;
    match loglik_model(&dynamics, &obs, &initial, skip_mask) {
        Ok(loglik) => Ok(LoglikOutcome { loglik, diverged_at: None }),
        Err(Error::Divergence { step }) => Ok(LoglikOutcome {
            loglik: f64::NEG_INFINITY,
            diverged_at: Some(step),
        }),
        Err(e) => Err(e),
    }
}
