//! Latent force modelling of subband amplitude envelopes.
//!
//! The pipeline splits a recording into ERB-spaced subbands, demodulates each into
//! an envelope and a carrier, fits a nonlinear latent force model to the envelopes
//! with a cubature Kalman filter, and generates new sounds by sampling the model.
//! NMF and temporal-NMF baselines provide a reconstruction-error reference.

pub mod audio_io;
pub mod baselines;
pub mod demod;
pub mod error;
pub mod filterbank;
pub mod gpssm;
pub mod inference;
pub mod lfm;
pub mod linalg;
pub mod pipeline;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
