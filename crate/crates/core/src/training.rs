//! Maximum-likelihood fitting of LFM parameters to an envelope matrix.
//!
//! Training is staged: the highest-energy channels and the shared parameters
//! are fitted first, then the remaining channels are appended and fitted with
//! everything from the first stage held fixed.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::EnvelopeMatrix;
use crate::error::{Error, Result};
use crate::gpssm::{KernelParams, MATERN32_DIM};
use crate::inference::marginal_loglik;
use crate::lfm::{build_layout, softplus, LfmParams, StateLayout, GAMMA_MAX, GAMMA_MIN};

pub const DEFAULT_HISTORY: usize = 10;
pub const DEFAULT_ACTIVE_FEEDBACK: [usize; 5] = [1, 2, 5, 8, 10];
pub const DEFAULT_ACTIVE_LAGS: [usize; 4] = [0, 1, 3, 6];
pub const DEFAULT_STAGE1_CHANNELS: usize = 6;
pub const DEFAULT_SKIP_DB: f64 = -60.0;
pub const FORCE_CANDIDATES: [usize; 3] = [1, 2, 3];

const DAMPING_RANGE: (f64, f64) = (0.1, 200.0);
const LENGTHSCALE_RANGE: (f64, f64) = (0.02, 1.0);
/// γ is kept this far inside its bounds when packed, so the logistic stays finite.
const GAMMA_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `None` picks the count from [`FORCE_CANDIDATES`] by BIC.
    pub forces: Option<usize>,
    pub history: usize,
    pub active_feedback: Vec<usize>,
    pub active_lags: Vec<usize>,
    pub stage1_channels: usize,
    pub max_iters: usize,
    pub fd_step: f64,
    pub seed: u64,
    pub skip_threshold_db: f64,
    /// Stop when one accepted step improves the loglik by less than this.
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            forces: None,
            history: DEFAULT_HISTORY,
            active_feedback: DEFAULT_ACTIVE_FEEDBACK.to_vec(),
            active_lags: DEFAULT_ACTIVE_LAGS.to_vec(),
            stage1_channels: DEFAULT_STAGE1_CHANNELS,
            max_iters: 100,
            fd_step: 1e-4,
            seed: 0,
            skip_threshold_db: DEFAULT_SKIP_DB,
            tolerance: 1e-6,
        }
    }
}

impl TrainConfig {
    /// Active sets restricted to what the history length allows.
    pub fn feedback_set(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.active_feedback.iter().copied().filter(|&l| l >= 1 && l <= self.history).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn lag_set(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.active_lags.iter().copied().filter(|&l| l <= self.history).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn check(&self) -> Result<()> {
        if !(self.fd_step > 0.0) || self.max_iters == 0 || self.stage1_channels == 0 {
            return Err(Error::invalid("fd_step, max_iters and stage1_channels must be positive"));
        }
        if self.forces == Some(0) {
            return Err(Error::invalid("need at least one latent force"));
        }
        if self.lag_set().is_empty() {
            return Err(Error::invalid("at least one sensitivity lag must be active"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub channels: Vec<usize>,
    /// Loglik at the start and after every accepted step.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub hit_iteration_cap: bool,
    /// All parameters as they stood when the stage finished.
    pub params: LfmParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stages: Vec<StageReport>,
    pub params: LfmParams,
    pub layout: StateLayout,
    /// Loglik of the final parameters on all channels.
    pub loglik: f64,
    pub wall_time_s: f64,
    /// `(R, BIC)` for every candidate tried when the force count was chosen.
    pub bic: Vec<(usize, f64)>,
    pub warnings: Vec<String>,
}

impl TrainReport {
    /// All stage traces back to back.
    pub fn loglik_trace(&self) -> Vec<f64> {
        self.stages.iter().flat_map(|s| s.loglik_trace.iter().copied()).collect()
    }
}

/// Indices of the `k` rows with the largest energy, ties to the lower index,
/// returned in ascending order.
pub fn select_channels(env: &EnvelopeMatrix, k: usize) -> Vec<usize> {
    let energy: Vec<f64> = (0..env.channels()).map(|m| env.values.row(m).iter().map(|v| v * v).sum()).collect();
    let mut order: Vec<usize> = (0..energy.len()).collect();
    order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order.into_iter().take(k.min(energy.len())).collect();
    chosen.sort_unstable();
    chosen
}

/// Frames whose loudest channel is more than `threshold_db` below the overall peak.
pub fn skip_mask(env: &EnvelopeMatrix, threshold_db: f64) -> Vec<bool> {
    let peak = env.values.max();
    let level = peak * 10f64.powf(threshold_db / 20.0);
    (0..env.frames()).map(|k| env.values.column(k).max() < level).collect()
}

/// Decay rate from the longest strictly decreasing run of `x`.
fn decay_rate(x: &[f64], frame_rate: f64) -> Option<f64> {
    let mut best = (0, 0);
    let mut start = 0;
    for k in 1..=x.len() {
        if k == x.len() || !(x[k] < x[k - 1] && x[k] > 0.0) {
            if k - start > best.1 - best.0 {
                best = (start, k);
            }
            start = k;
        }
    }
    let (a, b) = best;
    if b - a < 3 {
        return None;
    }
    let n = (b - a) as f64;
    let ts: Vec<f64> = (a..b).map(|k| k as f64 / frame_rate).collect();
    let ys: Vec<f64> = x[a..b].iter().map(|v| v.ln()).collect();
    let tm = ts.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let num: f64 = ts.iter().zip(&ys).map(|(t, y)| (t - tm) * (y - ym)).sum();
    let den: f64 = ts.iter().map(|t| (t - tm).powi(2)).sum();
    Some(-num / den)
}

/// Lag (seconds) of the first non-positive autocorrelation of `x`.
fn first_zero_crossing(x: &[f64], frame_rate: f64) -> Option<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let c0: f64 = c.iter().map(|v| v * v).sum();
    if c0 <= 0.0 {
        return None;
    }
    (1..n)
        .find(|&lag| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() <= 0.0)
        .map(|lag| lag as f64 / frame_rate)
}

/// Starting point for training with `forces` latent forces.
pub fn init_params(env: &EnvelopeMatrix, cfg: &TrainConfig, forces: usize) -> Result<LfmParams> {
    let (m, t) = (env.channels(), env.frames());
    for ch in 0..m {
        if env.values.row(ch).iter().all(|v| *v == 0.0) {
            return Err(Error::Degenerate(format!("channel {ch} is silent")));
        }
    }
    let fr = env.frame_rate;
    let mean_env: Vec<f64> = (0..t).map(|k| env.values.column(k).mean()).collect();
    let lengthscale = first_zero_crossing(&mean_env, fr)
        .unwrap_or(LENGTHSCALE_RANGE.1)
        .clamp(LENGTHSCALE_RANGE.0, LENGTHSCALE_RANGE.1);
    let kernels = vec![KernelParams::new(lengthscale, 1.0)?; forces];
    let power = env.values.iter().map(|v| v * v).sum::<f64>() / (m * t) as f64;
    let mut params = LfmParams::new(m, cfg.history, kernels, 1e-2 * power, cfg.feedback_set(), cfg.lag_set());
    // one scale per force, shared by all channels, to break the symmetry between forces
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let force_scale: Vec<f64> = (0..forces)
        .map(|r| if r == 0 { 1.0 } else { 1.0 + 0.2 * (rng.random::<f64>() - 0.5) })
        .collect();
    for ch in 0..m {
        let row: Vec<f64> = env.values.row(ch).iter().copied().collect();
        let d = decay_rate(&row, fr).unwrap_or(1.0).clamp(DAMPING_RANGE.0, DAMPING_RANGE.1);
        let peak = row.iter().fold(0.0_f64, |a, b| a.max(*b));
        params.damping[ch] = d;
        if params.active_lags.contains(&0) {
            for r in 0..forces {
                params.sensitivity[ch][r][0] = force_scale[r] * d * peak / (forces as f64 * softplus(1.0));
            }
        } else {
            let q = params.active_lags[0];
            for r in 0..forces {
                params.sensitivity[ch][r][q] = force_scale[r] * d * peak / (forces as f64 * softplus(1.0));
            }
        }
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Damping(usize),
    Gamma(usize),
    Feedback(usize, usize),
    Sensitivity(usize, usize, usize),
    Lengthscale(usize),
    Variance(usize),
    Sigma2,
}

/// Map between a parameter set and an unconstrained optimization vector.
///
/// Positive parameters are stored as logs and γ through a logistic onto
/// `[0.5, 1]`; couplings are stored as they are. Inactive couplings never
/// appear.
#[derive(Debug, Clone)]
pub struct ParamSpace {
    slots: Vec<Slot>,
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ParamSpace {
    /// Free parameters of `channels`, plus the shared ones when `shared` is set.
    pub fn new(template: &LfmParams, channels: &[usize], shared: bool) -> Self {
        let mut slots = Vec::new();
        for &m in channels {
            slots.push(Slot::Damping(m));
            slots.push(Slot::Gamma(m));
            for &lag in &template.active_feedback {
                slots.push(Slot::Feedback(m, lag));
            }
            for r in 0..template.forces() {
                for &q in &template.active_lags {
                    slots.push(Slot::Sensitivity(m, r, q));
                }
            }
        }
        if shared {
            for r in 0..template.forces() {
                slots.push(Slot::Lengthscale(r));
                slots.push(Slot::Variance(r));
            }
            slots.push(Slot::Sigma2);
        }
        ParamSpace { slots }
    }

    pub fn dim(&self) -> usize {
        self.slots.len()
    }

    pub fn pack(&self, p: &LfmParams) -> DVector<f64> {
        DVector::from_iterator(
            self.slots.len(),
            self.slots.iter().map(|s| match *s {
                Slot::Damping(m) => p.damping[m].max(1e-300).ln(),
                Slot::Gamma(m) => {
                    let g = p.gamma[m].clamp(GAMMA_MIN + GAMMA_MARGIN, GAMMA_MAX - GAMMA_MARGIN);
                    let u = (g - GAMMA_MIN) / (GAMMA_MAX - GAMMA_MIN);
                    (u / (1.0 - u)).ln()
                }
                Slot::Feedback(m, lag) => p.feedback[m][lag - 1],
                Slot::Sensitivity(m, r, q) => p.sensitivity[m][r][q],
                Slot::Lengthscale(r) => p.kernels[r].lengthscale.ln(),
                Slot::Variance(r) => p.kernels[r].variance.ln(),
                Slot::Sigma2 => p.sigma2.ln(),
            }),
        )
    }

    /// `template` with the slots overwritten from `v`.
    pub fn unpack(&self, v: &DVector<f64>, template: &LfmParams) -> LfmParams {
        let mut p = template.clone();
        for (s, &x) in self.slots.iter().zip(v.iter()) {
            match *s {
                Slot::Damping(m) => p.damping[m] = x.exp(),
                Slot::Gamma(m) => p.gamma[m] = GAMMA_MIN + (GAMMA_MAX - GAMMA_MIN) * logistic(x),
                Slot::Feedback(m, lag) => p.feedback[m][lag - 1] = x,
                Slot::Sensitivity(m, r, q) => p.sensitivity[m][r][q] = x,
                Slot::Lengthscale(r) => p.kernels[r].lengthscale = x.exp(),
                Slot::Variance(r) => p.kernels[r].variance = x.exp(),
                Slot::Sigma2 => p.sigma2 = x.exp(),
            }
        }
        p
    }
}

/// Finite-difference gradient of `f` at `x`, with per-coordinate step
/// `rel_step·max(|x_i|, 1)`. Evaluations run in parallel.
pub fn fd_gradient<F>(f: &F, x: &DVector<f64>, fx: f64, rel_step: f64, central: bool) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    let n = x.len();
    let parts: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            let mut xp = x.clone();
            xp[i] += h;
            let fp = f(&xp);
            if central {
                let mut xm = x.clone();
                xm[i] -= h;
                (fp - f(&xm)) / (2.0 * h)
            } else {
                (fp - fx) / h
            }
        })
        .collect();
    DVector::from_vec(parts)
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    /// Objective at the start and after each accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub hit_cap: bool,
}

/// BFGS with Armijo backtracking and central finite-difference gradients.
/// Steps are only accepted when they lower `f`, so `trace` is nonincreasing.
pub fn minimize<F>(f: &F, x0: DVector<f64>, max_iters: usize, rel_step: f64, tolerance: f64) -> Minimum
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    let mut trace = vec![fx];
    if n == 0 || !fx.is_finite() {
        return Minimum { x, value: fx, trace, iterations: 0, hit_cap: false };
    }
    let mut g = fd_gradient(f, &x, fx, rel_step, true);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let mut dir = -(&h_inv * &g);
        if dir.dot(&g) >= 0.0 || !dir.iter().all(|v| v.is_finite()) {
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        // keep the first trial step within one unit of the reparameterized space
        let longest = dir.amax();
        let mut t = if longest > 1.0 { 1.0 / longest } else { 1.0 };
        let slope = dir.dot(&g);
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &x + &dir * t;
            let ft = f(&trial);
            if ft.is_finite() && ft <= fx + 1e-4 * t * slope && ft < fx {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            converged = true;
            break;
        };
        let g_new = fd_gradient(f, &x_new, f_new, rel_step, true);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if iterations == 1 {
                h_inv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - &s * y.transpose() * rho;
            let right = &i - &y * s.transpose() * rho;
            h_inv = &left * &h_inv * &right + &s * s.transpose() * rho;
        }
        let improvement = fx - f_new;
        x = x_new;
        fx = f_new;
        g = g_new;
        trace.push(fx);
        log::debug!("iteration {iterations}: objective {fx:.6}");
        if improvement < tolerance || g.amax() < 1e-8 {
            converged = true;
            break;
        }
    }
    Minimum { x, value: fx, trace, iterations, hit_cap: !converged }
}

fn run_stage(
    env: &EnvelopeMatrix,
    params: &LfmParams,
    space: &ParamSpace,
    skip: &[bool],
    cfg: &TrainConfig,
) -> Result<(LfmParams, Minimum)> {
    let layout = build_layout(env.channels(), params.forces(), params.history(), MATERN32_DIM)?;
    let out = marginal_loglik(env, params, &layout, skip)?;
    if let Some(step) = out.diverged_at {
        return Err(Error::InitialDivergence { step });
    }
    let objective = |v: &DVector<f64>| match marginal_loglik(env, &space.unpack(v, params), &layout, skip) {
        Ok(out) if out.loglik.is_finite() => -out.loglik,
        _ => f64::INFINITY,
    };
    let x0 = space.pack(params);
    let min = minimize(&objective, x0, cfg.max_iters, cfg.fd_step, cfg.tolerance);
    let fitted = space.unpack(&min.x, params);
    Ok((fitted, min))
}

/// Staged fit with a fixed number of forces.
pub fn optimize_with_forces(env: &EnvelopeMatrix, cfg: &TrainConfig, forces: usize) -> Result<TrainReport> {
    cfg.check()?;
    let start = Instant::now();
    let m = env.channels();
    let skip = skip_mask(env, cfg.skip_threshold_db);
    let mut params = init_params(env, cfg, forces)?;
    let mut stages = Vec::new();
    let mut warnings = Vec::new();

    let first = select_channels(env, cfg.stage1_channels);
    let sub_env = env.select_rows(&first);
    let sub_params = params.select_channels(&first);
    let local: Vec<usize> = (0..first.len()).collect();
    let (fitted, min) = run_stage(&sub_env, &sub_params, &ParamSpace::new(&sub_params, &local, true), &skip, cfg)?;
    for (i, &ch) in first.iter().enumerate() {
        params.damping[ch] = fitted.damping[i];
        params.gamma[ch] = fitted.gamma[i];
        params.feedback[ch] = fitted.feedback[i].clone();
        params.sensitivity[ch] = fitted.sensitivity[i].clone();
    }
    params.kernels = fitted.kernels.clone();
    params.sigma2 = fitted.sigma2;
    stages.push(stage_report(first.clone(), &min, &params, &mut warnings, 1));

    let rest: Vec<usize> = (0..m).filter(|c| !first.contains(c)).collect();
    if !rest.is_empty() {
        let space = ParamSpace::new(&params, &rest, false);
        let (fitted, min) = run_stage(env, &params, &space, &skip, cfg)?;
        params = fitted;
        stages.push(stage_report(rest, &min, &params, &mut warnings, 2));
    }

    let layout = build_layout(m, forces, cfg.history, MATERN32_DIM)?;
    let loglik = marginal_loglik(env, &params, &layout, &skip)?.loglik;
    Ok(TrainReport {
        stages,
        params,
        layout,
        loglik,
        wall_time_s: start.elapsed().as_secs_f64(),
        bic: Vec::new(),
        warnings,
    })
}

fn stage_report(channels: Vec<usize>, min: &Minimum, params: &LfmParams, warnings: &mut Vec<String>, stage: usize) -> StageReport {
    if min.hit_cap {
        let msg = format!("stage {stage} stopped at the iteration cap ({} iterations)", min.iterations);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    StageReport {
        channels,
        loglik_trace: min.trace.iter().map(|v| -v).collect(),
        iterations: min.iterations,
        hit_iteration_cap: min.hit_cap,
        params: params.clone(),
    }
}

fn free_parameter_count(p: &LfmParams) -> usize {
    p.channels() * (2 + p.active_feedback.len() + p.forces() * p.active_lags.len()) + 2 * p.forces() + 1
}

/// Staged fit; the force count comes from the config or is chosen by BIC.
pub fn optimize(env: &EnvelopeMatrix, cfg: &TrainConfig) -> Result<TrainReport> {
    if let Some(r) = cfg.forces {
        return optimize_with_forces(env, cfg, r);
    }
    let start = Instant::now();
    let observed = skip_mask(env, cfg.skip_threshold_db).iter().filter(|s| !**s).count() * env.channels();
    let mut best: Option<(f64, TrainReport)> = None;
    let mut table = Vec::new();
    for r in FORCE_CANDIDATES {
        let report = optimize_with_forces(env, cfg, r)?;
        let k = free_parameter_count(&report.params) as f64;
        let bic = -2.0 * report.loglik + k * (observed.max(1) as f64).ln();
        table.push((r, bic));
        log::info!("R = {r}: loglik {:.3}, BIC {bic:.3}", report.loglik);
        if best.as_ref().is_none_or(|(b, _)| bic < *b) {
            best = Some((bic, report));
        }
    }
    let (_, mut report) = best.expect("at least one candidate");
    report.bic = table;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}
