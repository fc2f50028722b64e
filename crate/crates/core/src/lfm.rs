//! The augmented latent force model for subband envelopes.
//!
//! Each output channel follows a first-order nonlinear ODE stepped with Euler's
//! method:
//!
//! ```text
//! dx_m/dt = -D_m x_m^γ_m + Σ_p B_mp x_m[k-p] + Σ_q Σ_r S_mrq g(u_r[k-q])
//! ```
//!
//! where `g` is the softplus. Past outputs and latent values are carried in the
//! state vector as history slots which are shifted down by one every step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpssm::{discretize, kernel_to_ssm, DiscreteKernelStep, KernelParams, MATERN32_DIM};
use crate::linalg::symmetrize;

pub const GAMMA_MIN: f64 = 0.5;
pub const GAMMA_MAX: f64 = 1.0;
/// Process-noise jitter on the output block.
pub const OUTPUT_JITTER: f64 = 1e-10;

/// `g(u) = ln(1 + e^u)`, evaluated without overflow.
pub fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 20.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// `sign(x)·|x|^γ`.
pub fn signed_pow(x: f64, gamma: f64) -> f64 {
    if gamma == 1.0 {
        x
    } else {
        x.signum() * x.abs().powf(gamma)
    }
}

/// Function applied to latent values before they drive the outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Softplus,
    /// Makes the whole transition linear when every γ is 1; used to check the
    /// filter against an exact Kalman filter.
    Identity,
}

impl Nonlinearity {
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Nonlinearity::Softplus => softplus(u),
            Nonlinearity::Identity => u,
        }
    }
}

/// Parameters of the augmented LFM.
///
/// `feedback[m][p-1]` is B_mp for lags p = 1..=P and `sensitivity[m][r][q]` is
/// S_mrq for lags q = 0..=P. Entries at lags outside `active_feedback` /
/// `active_lags` are held at exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfmParams {
    pub damping: Vec<f64>,
    pub gamma: Vec<f64>,
    pub feedback: Vec<Vec<f64>>,
    pub sensitivity: Vec<Vec<Vec<f64>>>,
    pub kernels: Vec<KernelParams>,
    pub sigma2: f64,
    pub active_feedback: Vec<usize>,
    pub active_lags: Vec<usize>,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
}

impl LfmParams {
    /// All-zero couplings with unit damping and linear decay.
    pub fn new(
        channels: usize,
        history: usize,
        kernels: Vec<KernelParams>,
        sigma2: f64,
        active_feedback: Vec<usize>,
        active_lags: Vec<usize>,
    ) -> Self {
        let forces = kernels.len();
        LfmParams {
            damping: vec![1.0; channels],
            gamma: vec![1.0; channels],
            feedback: vec![vec![0.0; history]; channels],
            sensitivity: vec![vec![vec![0.0; history + 1]; forces]; channels],
            kernels,
            sigma2,
            active_feedback,
            active_lags,
            nonlinearity: Nonlinearity::Softplus,
        }
    }

    pub fn channels(&self) -> usize {
        self.damping.len()
    }

    pub fn forces(&self) -> usize {
        self.kernels.len()
    }

    pub fn history(&self) -> usize {
        self.feedback.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, r, p) = (self.channels(), self.forces(), self.history());
        if m == 0 || r == 0 {
            return Err(Error::invalid("model needs at least one channel and one force"));
        }
        if self.gamma.len() != m || self.feedback.len() != m || self.sensitivity.len() != m {
            return Err(Error::ShapeMismatch("per-channel parameter lengths disagree".into()));
        }
        for ch in 0..m {
            if self.feedback[ch].len() != p
                || self.sensitivity[ch].len() != r
                || self.sensitivity[ch].iter().any(|s| s.len() != p + 1)
            {
                return Err(Error::ShapeMismatch(format!("coupling shapes of channel {ch}")));
            }
            if !(self.damping[ch] >= 0.0) {
                return Err(Error::invalid(format!("damping of channel {ch} must be >= 0")));
            }
            if !(GAMMA_MIN..=GAMMA_MAX).contains(&self.gamma[ch]) {
                return Err(Error::invalid(format!("gamma of channel {ch} outside [0.5, 1]")));
            }
            for lag in 1..=p {
                if !self.active_feedback.contains(&lag) && self.feedback[ch][lag - 1] != 0.0 {
                    return Err(Error::invalid(format!("inactive feedback B[{ch}][{lag}] is nonzero")));
                }
            }
            for s in &self.sensitivity[ch] {
                for (lag, v) in s.iter().enumerate() {
                    if !self.active_lags.contains(&lag) && *v != 0.0 {
                        return Err(Error::invalid(format!("inactive lag S[{ch}][.][{lag}] is nonzero")));
                    }
                }
            }
        }
        if self.active_feedback.iter().any(|&l| l == 0 || l > p) || self.active_lags.iter().any(|&l| l > p) {
            return Err(Error::invalid("active lag sets must lie within 1..=P and 0..=P"));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::invalid("measurement noise variance must be positive"));
        }
        for k in &self.kernels {
            KernelParams::new(k.lengthscale, k.variance)?;
        }
        Ok(())
    }

    /// Parameters restricted to the given channels, in the given order.
    pub fn select_channels(&self, rows: &[usize]) -> LfmParams {
        LfmParams {
            damping: rows.iter().map(|&i| self.damping[i]).collect(),
            gamma: rows.iter().map(|&i| self.gamma[i]).collect(),
            feedback: rows.iter().map(|&i| self.feedback[i].clone()).collect(),
            sensitivity: rows.iter().map(|&i| self.sensitivity[i].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Index map of the augmented state vector.
///
/// Blocks, in order: current outputs (M), latent SDE states (R·d), output
/// history slots 1..=P (M each), latent-value history slots 1..=P (R each).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub m: usize,
    pub r: usize,
    pub p: usize,
    pub d: usize,
}

impl StateLayout {
    pub fn latent_offset(&self) -> usize {
        self.m
    }

    pub fn output_history_offset(&self) -> usize {
        self.m + self.r * self.d
    }

    pub fn latent_history_offset(&self) -> usize {
        self.output_history_offset() + self.m * self.p
    }

    pub fn n(&self) -> usize {
        self.m + self.r * self.d + self.m * self.p + self.r * self.p
    }

    /// Index of SDE component `j` of force `r`.
    pub fn latent(&self, r: usize, j: usize) -> usize {
        self.latent_offset() + r * self.d + j
    }

    /// Index of channel `m`'s output from `lag` steps ago (1..=P).
    pub fn output_history(&self, lag: usize, m: usize) -> usize {
        self.output_history_offset() + (lag - 1) * self.m + m
    }

    /// Index of force `r`'s latent value from `lag` steps ago (1..=P).
    pub fn latent_history(&self, lag: usize, r: usize) -> usize {
        self.latent_history_offset() + (lag - 1) * self.r + r
    }

    pub fn matches(&self, params: &LfmParams) -> bool {
        self.m == params.channels() && self.r == params.forces() && self.p == params.history()
    }
}

pub fn build_layout(m: usize, r: usize, p: usize, d: usize) -> Result<StateLayout> {
    if m == 0 || r == 0 || d == 0 {
        return Err(Error::invalid(format!("invalid layout dimensions M={m} R={r} d={d}")));
    }
    Ok(StateLayout { m, r, p, d })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Latent SDE states are stored as `(u, u'/α)` so both components share the
/// kernel's variance; the raw derivative variance grows as 3/ℓ² and would
/// otherwise dominate the rounding error of the whole covariance.
fn latent_scaling(k: &KernelParams) -> DMatrix<f64> {
    let alpha = 3f64.sqrt() / k.lengthscale;
    DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 1.0 / alpha]))
}

/// Discrete-time dynamics of an LFM for a fixed parameter set and step size.
#[derive(Debug, Clone)]
pub struct LfmDynamics {
    pub params: LfmParams,
    pub layout: StateLayout,
    pub dt: f64,
    steps: Vec<DiscreteKernelStep>,
    process_noise: DMatrix<f64>,
    observed: Vec<usize>,
}

impl LfmDynamics {
    pub fn new(params: LfmParams, layout: StateLayout, dt: f64) -> Result<Self> {
        params.validate()?;
        if !layout.matches(&params) || layout.d != MATERN32_DIM {
            return Err(Error::ShapeMismatch(format!(
                "layout (M={}, R={}, P={}, d={}) does not fit parameters (M={}, R={}, P={})",
                layout.m,
                layout.r,
                layout.p,
                layout.d,
                params.channels(),
                params.forces(),
                params.history()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::invalid("time step must be positive"));
        }
        let steps: Vec<DiscreteKernelStep> = params
            .kernels
            .iter()
            .map(|k| {
                let step = discretize(&kernel_to_ssm(k), dt);
                let t = latent_scaling(k);
                let t_inv = DMatrix::from_diagonal(&t.diagonal().map(|v| 1.0 / v));
                let mut q = &t * &step.q * &t;
                symmetrize(&mut q);
                DiscreteKernelStep { a: &t * step.a * t_inv, q }
            })
            .collect();
        let n = layout.n();
        let mut q = DMatrix::zeros(n, n);
        for i in 0..layout.m {
            q[(i, i)] = OUTPUT_JITTER;
        }
        for (r, step) in steps.iter().enumerate() {
            let o = layout.latent(r, 0);
            q.view_mut((o, o), (layout.d, layout.d)).copy_from(&step.q);
        }
        Ok(LfmDynamics {
            observed: (0..layout.m).collect(),
            params,
            layout,
            dt,
            steps,
            process_noise: q,
        })
    }

    /// Per-force transition and noise in the scaled latent coordinates.
    pub fn kernel_steps(&self) -> &[DiscreteKernelStep] {
        &self.steps
    }

    /// Derivative of output `m` given its current value, its output history
    /// (`out_hist(lag)`) and the forcing `g(u)` at every lag (`forcing[q * R + r]`).
    fn output_rate(&self, m: usize, output: f64, out_hist: impl Fn(usize) -> f64, forcing: &[f64]) -> f64 {
        let p = &self.params;
        let r_count = self.layout.r;
        let mut rate = -p.damping[m] * signed_pow(output, p.gamma[m]);
        for &lag in &p.active_feedback {
            rate += p.feedback[m][lag - 1] * out_hist(lag);
        }
        for &q in &p.active_lags {
            for r in 0..r_count {
                rate += p.sensitivity[m][r][q] * forcing[q * r_count + r];
            }
        }
        rate
    }

    /// Deterministic part of one step: Euler update of the outputs, exact
    /// propagation of the latent SDE states, and copy-down of the history slots.
    pub fn transition(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut next = DVector::zeros(self.layout.n());
        self.transition_into(x.as_slice(), next.as_mut_slice());
        next
    }

    /// [`Self::transition`] writing into `next`.
    pub fn transition_into(&self, x: &[f64], next: &mut [f64]) {
        let l = &self.layout;
        let nl = self.params.nonlinearity;
        let mut forcing = [0.0; 64];
        let mut heap = Vec::new();
        let needed = (l.p + 1) * l.r;
        let forcing: &mut [f64] = if needed <= forcing.len() {
            &mut forcing[..needed]
        } else {
            heap.resize(needed, 0.0);
            &mut heap
        };
        for &q in &self.params.active_lags {
            for r in 0..l.r {
                let u = if q == 0 { x[l.latent(r, 0)] } else { x[l.latent_history(q, r)] };
                forcing[q * l.r + r] = nl.apply(u);
            }
        }
        for m in 0..l.m {
            let rate = self.output_rate(m, x[m], |lag| x[l.output_history(lag, m)], forcing);
            next[m] = x[m] + self.dt * rate;
        }
        for (r, step) in self.steps.iter().enumerate() {
            let o = l.latent(r, 0);
            let (z0, z1) = (x[o], x[o + 1]);
            next[o] = step.a[(0, 0)] * z0 + step.a[(0, 1)] * z1;
            next[o + 1] = step.a[(1, 0)] * z0 + step.a[(1, 1)] * z1;
        }
        if l.p > 0 {
            let oh = l.output_history_offset();
            let lh = l.latent_history_offset();
            // slot lag takes slot lag-1; slot 1 takes the current values
            next[oh + l.m..oh + l.m * l.p].copy_from_slice(&x[oh..oh + l.m * (l.p - 1)]);
            next[oh..oh + l.m].copy_from_slice(&x[..l.m]);
            next[lh + l.r..lh + l.r * l.p].copy_from_slice(&x[lh..lh + l.r * (l.p - 1)]);
            for r in 0..l.r {
                next[lh + r] = x[l.latent(r, 0)];
            }
        }
    }

    pub fn process_noise(&self) -> &DMatrix<f64> {
        &self.process_noise
    }

    /// Output block of a state vector.
    pub fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, self.layout.m).into_owned()
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    /// Same dynamics observed at other state entries (outputs by default).
    pub fn with_observed(mut self, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() || indices.iter().any(|&i| i >= self.layout.n()) {
            return Err(Error::invalid("observed indices must be nonempty and inside the state"));
        }
        self.observed = indices;
        Ok(self)
    }

    /// Prior at the first frame: outputs centred on the first observation with
    /// variance σ², latents at their stationary distribution, history slots
    /// replicating the initial values with (near) zero variance.
    pub fn initial_state(&self, first_frame: &[f64]) -> GaussianState {
        let l = &self.layout;
        let n = l.n();
        let mut mean = DVector::zeros(n);
        let mut cov = DMatrix::zeros(n, n);
        for m in 0..l.m {
            mean[m] = first_frame[m];
            cov[(m, m)] = self.params.sigma2;
            for lag in 1..=l.p {
                let i = l.output_history(lag, m);
                mean[i] = first_frame[m];
                cov[(i, i)] = OUTPUT_JITTER;
            }
        }
        for (r, k) in self.params.kernels.iter().enumerate() {
            let t = latent_scaling(k);
            let p_inf = &t * kernel_to_ssm(k).p_inf * &t;
            let o = l.latent(r, 0);
            cov.view_mut((o, o), (l.d, l.d)).copy_from(&p_inf);
            for lag in 1..=l.p {
                let i = l.latent_history(lag, r);
                cov[(i, i)] = OUTPUT_JITTER;
            }
        }
        GaussianState { mean, cov }
    }

    /// Runs the outputs forward deterministically, with the latent values at
    /// every frame taken from `latents` (R×T) instead of the SDE. Frame 0 holds
    /// `initial_outputs`; history slots start as copies of the first frame.
    pub fn drive(&self, initial_outputs: &[f64], latents: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let l = &self.layout;
        if latents.nrows() != l.r || initial_outputs.len() != l.m {
            return Err(Error::ShapeMismatch(format!(
                "driving {} forces / {} outputs through a model with R={}, M={}",
                latents.nrows(),
                initial_outputs.len(),
                l.r,
                l.m
            )));
        }
        let frames = latents.ncols();
        let mut out = DMatrix::zeros(l.m, frames);
        if frames == 0 {
            return Ok(out);
        }
        let mut x = initial_outputs.to_vec();
        // out_hist[lag-1][m], lat_hist[lag-1][r]
        let mut out_hist = vec![x.clone(); l.p];
        let mut lat_hist = vec![latents.column(0).iter().copied().collect::<Vec<f64>>(); l.p];
        out.set_column(0, &DVector::from_column_slice(&x));
        for k in 1..frames {
            let mut forcing = vec![0.0; (l.p + 1) * l.r];
            for &q in &self.params.active_lags {
                for r in 0..l.r {
                    let u = if q == 0 { latents[(r, k - 1)] } else { lat_hist[q - 1][r] };
                    forcing[q * l.r + r] = self.params.nonlinearity.apply(u);
                }
            }
            let rates: Vec<f64> = (0..l.m)
                .map(|m| self.output_rate(m, x[m], |lag| out_hist[lag - 1][m], &forcing))
                .collect();
            let next: Vec<f64> = x.iter().zip(&rates).map(|(v, d)| v + self.dt * d).collect();
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Unstable { step: k });
            }
            if l.p > 0 {
                out_hist.rotate_right(1);
                out_hist[0] = x;
                lat_hist.rotate_right(1);
                lat_hist[0] = latents.column(k - 1).iter().copied().collect();
            }
            x = next;
            out.set_column(k, &DVector::from_column_slice(&x));
        }
        Ok(out)
    }
}

/// One deterministic transition of `point` (see [`LfmDynamics::transition`]).
pub fn transition(point: &DVector<f64>, params: &LfmParams, layout: &StateLayout, dt: f64) -> Result<DVector<f64>> {
    if point.len() != layout.n() {
        return Err(Error::ShapeMismatch(format!("state has {} entries, layout needs {}", point.len(), layout.n())));
    }
    Ok(LfmDynamics::new(params.clone(), *layout, dt)?.transition(point))
}

pub fn process_noise(params: &LfmParams, layout: &StateLayout, dt: f64) -> Result<DMatrix<f64>> {
    Ok(LfmDynamics::new(params.clone(), *layout, dt)?.process_noise().clone())
}

pub fn measure(mean: &DVector<f64>, layout: &StateLayout) -> DVector<f64> {
    mean.rows(0, layout.m).into_owned()
}
