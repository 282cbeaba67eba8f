//! Latent bridge models for audio super-resolution.
//!
//! The crate is split along the processing chain: [`dsp`] primitives and
//! [`wav`] I/O, bandwidth detection, evaluation metrics, the waveform
//! [`codec`], the bridge numerics and noise [`predictor`], and the
//! end-to-end [`pipeline`].

pub mod bandwidth;
pub mod bridge;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod wav;

pub use dsp::Waveform;
pub use error::{Error, Result};
