//! End-to-end steps shared by the command line and the tests: front end,
//! model files, reconstruction, generation and per-sound evaluation.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_io::{resample, AudioBuffer, EnvelopeMatrix, INTERNAL_RATE};
use crate::baselines::{nmf, tnmf, Metrics, SoundMetrics};
use crate::demod::{demodulate, DEFAULT_DECIMATION, DEFAULT_LENGTHSCALE_MS};
use crate::filterbank::{analyze, design_filterbank, ErbFilterbank, DEFAULT_CHANNELS, DEFAULT_F_HI, DEFAULT_F_LO};
use crate::inference::{ckf_filter, rts_smooth};
use crate::lfm::{LfmDynamics, LfmParams, StateLayout};
use crate::synthesis::{fit_carriers, fit_modulator, generate_envelopes, render, sample_latents, sub_seed, CarrierModel, ModulatorModel};
use crate::training::{optimize, skip_mask, TrainConfig, TrainReport};
use crate::{Error, Result};

pub const MODEL_VERSION: &str = "lfm-audio-model/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontEnd {
    pub channels: usize,
    pub f_lo: f64,
    pub f_hi: f64,
    pub lengthscale_ms: f64,
    pub decimation: usize,
}

impl Default for FrontEnd {
    fn default() -> Self {
        FrontEnd {
            channels: DEFAULT_CHANNELS,
            f_lo: DEFAULT_F_LO,
            f_hi: DEFAULT_F_HI,
            lengthscale_ms: DEFAULT_LENGTHSCALE_MS,
            decimation: DEFAULT_DECIMATION,
        }
    }
}

impl FrontEnd {
    pub fn check(&self) -> Result<()> {
        let nyquist = INTERNAL_RATE as f64 / 2.0;
        if self.channels == 0 {
            return Err(Error::invalid("channels must be at least 1"));
        }
        if !(self.f_lo > 0.0 && self.f_lo < self.f_hi && self.f_hi < nyquist) {
            return Err(Error::invalid(format!(
                "need 0 < f_lo < f_hi < {nyquist} Hz, got f_lo={} f_hi={}",
                self.f_lo, self.f_hi
            )));
        }
        if self.decimation == 0 {
            return Err(Error::invalid("decimation must be at least 1"));
        }
        if !self.lengthscale_ms.is_finite() {
            return Err(Error::invalid("lengthscale must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemodSpec {
    pub lengthscale_ms: f64,
    pub decimation: usize,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub envelopes: EnvelopeMatrix,
    /// Full-rate carriers, one row per channel.
    pub carriers: Vec<Vec<f64>>,
    pub fb: ErbFilterbank,
    pub demod: DemodSpec,
}

/// Resamples to the internal rate, splits into ERB subbands and demodulates
/// every subband.
pub fn decompose(audio: &AudioBuffer, fe: &FrontEnd) -> Result<Decomposition> {
    fe.check()?;
    let audio = if audio.sample_rate == INTERNAL_RATE {
        audio.clone()
    } else {
        resample(audio, INTERNAL_RATE)?
    };
    let fb = design_filterbank(fe.f_lo, fe.f_hi, fe.channels, INTERNAL_RATE)?;
    let bands = analyze(&audio, &fb)?;
    let sr = INTERNAL_RATE as f64;
    let parts = bands
        .subbands
        .par_iter()
        .map(|s| demodulate(s, fe.lengthscale_ms, sr, fe.decimation))
        .collect::<Result<Vec<_>>>()?;
    let frames = parts[0].envelope.len();
    let values = DMatrix::from_fn(parts.len(), frames, |m, k| parts[m].envelope[k]);
    let envelopes = EnvelopeMatrix::new(values, sr / fe.decimation as f64, fb.center_freqs.clone())?;
    Ok(Decomposition {
        envelopes,
        carriers: parts.into_iter().map(|p| p.carrier).collect(),
        fb,
        demod: DemodSpec {
            lengthscale_ms: fe.lengthscale_ms,
            decimation: fe.decimation,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: TrainConfig,
    /// SHA-256 of the config's JSON form.
    pub config_hash: String,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: String,
    pub frame_rate: f64,
    pub filterbank: Option<ErbFilterbank>,
    pub demod: Option<DemodSpec>,
    pub params: LfmParams,
    pub layout: StateLayout,
    pub carriers: Option<CarrierModel>,
    pub modulator: ModulatorModel,
    /// Output values generation starts from.
    pub initial_outputs: Vec<f64>,
    pub provenance: Provenance,
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    Ok(hex_digest(serde_json::to_string(cfg)?.as_bytes()))
}

impl ModelFile {
    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_VERSION {
            return Err(Error::invalid(format!(
                "model version `{}` is not supported (expected `{MODEL_VERSION}`)",
                self.version
            )));
        }
        self.params.validate()?;
        let m = self.params.channels();
        if !self.layout.matches(&self.params) {
            return Err(Error::ShapeMismatch("layout dimensions disagree with the parameters".into()));
        }
        if self.initial_outputs.len() != m {
            return Err(Error::ShapeMismatch(format!("{} initial outputs for {m} channels", self.initial_outputs.len())));
        }
        if let Some(fb) = &self.filterbank {
            if fb.channels() != m {
                return Err(Error::ShapeMismatch(format!("{}-channel filterbank for {m} channels", fb.channels())));
            }
        }
        if let Some(c) = &self.carriers {
            if c.channels.len() != m {
                return Err(Error::ShapeMismatch(format!("{} carriers for {m} channels", c.channels.len())));
            }
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::invalid("frame rate must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ModelFile = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }
}

/// Smoothed latent means (R×T) of `env` under `params`.
pub fn latent_posterior(env: &EnvelopeMatrix, params: &LfmParams, layout: &StateLayout, skip_db: f64) -> Result<DMatrix<f64>> {
    let skip = skip_mask(env, skip_db);
    let fr = ckf_filter(env, params, layout, &skip)?;
    let sr = rts_smooth(&fr, params, layout, env.frame_rate)?;
    let rows: Vec<usize> = (0..layout.r).map(|r| layout.latent(r, 0)).collect();
    Ok(sr.mean_rows(&rows))
}

/// Envelopes obtained by driving the model with the smoothed latent means,
/// starting from the first observed frame. Clamped at zero.
pub fn reconstruct(env: &EnvelopeMatrix, params: &LfmParams, layout: &StateLayout, skip_db: f64) -> Result<DMatrix<f64>> {
    if env.channels() != params.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} envelope channels for a {}-channel model",
            env.channels(),
            params.channels()
        )));
    }
    let latents = latent_posterior(env, params, layout, skip_db)?;
    let dyns = LfmDynamics::new(params.clone(), *layout, 1.0 / env.frame_rate)?;
    let first: Vec<f64> = env.values.column(0).iter().copied().collect();
    Ok(dyns.drive(&first, &latents)?.map(|v| v.max(0.0)))
}

/// Everything a model file needs beyond the training report.
#[derive(Debug, Clone, Default)]
pub struct ModelInputs {
    pub filterbank: Option<ErbFilterbank>,
    pub demod: Option<DemodSpec>,
    /// Full-rate carriers for the carrier model.
    pub carriers: Option<Vec<Vec<f64>>>,
}

pub fn build_model(env: &EnvelopeMatrix, report: &TrainReport, cfg: &TrainConfig, inputs: ModelInputs) -> Result<ModelFile> {
    let latents = latent_posterior(env, &report.params, &report.layout, cfg.skip_threshold_db)?;
    let modulator = fit_modulator(&latents, env.frame_rate)?;
    let carriers = match (&inputs.carriers, &inputs.filterbank) {
        (Some(c), Some(fb)) => Some(fit_carriers(c, fb)?),
        (Some(_), None) => return Err(Error::invalid("carriers were given without a filterbank")),
        _ => None,
    };
    let initial_outputs = env.values.row_iter().map(|r| r.mean()).collect();
    let model = ModelFile {
        version: MODEL_VERSION.into(),
        frame_rate: env.frame_rate,
        filterbank: inputs.filterbank,
        demod: inputs.demod,
        params: report.params.clone(),
        layout: report.layout,
        carriers,
        modulator,
        initial_outputs,
        provenance: Provenance {
            config: cfg.clone(),
            config_hash: config_hash(cfg)?,
            loglik: report.loglik,
        },
    };
    model.validate()?;
    Ok(model)
}

pub fn train_model(env: &EnvelopeMatrix, cfg: &TrainConfig, inputs: ModelInputs) -> Result<(ModelFile, TrainReport)> {
    let report = optimize(env, cfg)?;
    let model = build_model(env, &report, cfg, inputs)?;
    Ok((model, report))
}

/// Number of frames covering `duration` seconds.
pub fn frames_for(duration: f64, frame_rate: f64) -> Result<usize> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::invalid(format!("duration must be positive, got {duration}")));
    }
    Ok(((duration * frame_rate).round() as usize).max(1))
}

/// Generated envelopes of `frames` frames.
pub fn sample_envelopes(model: &ModelFile, frames: usize, seed: u64) -> Result<EnvelopeMatrix> {
    let latents = sample_latents(&model.params, &model.modulator, frames, model.frame_rate, seed)?;
    generate_envelopes(&model.params, &model.layout, &latents, model.frame_rate, &model.initial_outputs)
}

/// A new sound of `duration` seconds, with the envelopes it was rendered from.
pub fn generate(model: &ModelFile, duration: f64, seed: u64) -> Result<(AudioBuffer, EnvelopeMatrix)> {
    let (Some(fb), Some(carriers)) = (&model.filterbank, &model.carriers) else {
        return Err(Error::invalid(
            "model has no filterbank or carrier model; train it with the filterbank and carriers from decompose",
        ));
    };
    let env = sample_envelopes(model, frames_for(duration, model.frame_rate)?, seed)?;
    let audio = render(&env, carriers, fb, sub_seed(seed, u32::MAX as u64))?;
    Ok((audio, env))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub nmf_iters: usize,
    pub tnmf_beta: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            nmf_iters: 500,
            tnmf_beta: 1.0,
        }
    }
}

impl BaselineConfig {
    pub fn check(&self) -> Result<()> {
        if self.nmf_iters == 0 {
            return Err(Error::invalid("nmf_iters must be at least 1"));
        }
        if !(self.tnmf_beta >= 0.0 && self.tnmf_beta.is_finite()) {
            return Err(Error::invalid(format!("tnmf_beta must be finite and >= 0, got {}", self.tnmf_beta)));
        }
        Ok(())
    }
}

/// Contents of a `--config` file; every section and field is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub front_end: FrontEnd,
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
}

/// LFM, tNMF and NMF reconstruction metrics for one sound, with K = R.
pub fn evaluate_sound(
    name: &str,
    audio: &AudioBuffer,
    fe: &FrontEnd,
    cfg: &TrainConfig,
    baselines: &BaselineConfig,
) -> Result<SoundMetrics> {
    let dec = decompose(audio, fe)?;
    let env = &dec.envelopes;
    let report = optimize(env, cfg)?;
    let recon = reconstruct(env, &report.params, &report.layout, cfg.skip_threshold_db)?;
    let k = report.layout.r;
    let plain = nmf(env, k, baselines.nmf_iters, cfg.seed)?;
    let smooth = tnmf(env, k, baselines.nmf_iters, baselines.tnmf_beta, cfg.seed)?;
    Ok(SoundMetrics {
        sound: name.into(),
        lfm: Metrics::between(&env.values, &recon)?,
        tnmf: Metrics::between(&env.values, &smooth.reconstruction())?,
        nmf: Metrics::between(&env.values, &plain.reconstruction())?,
    })
}
