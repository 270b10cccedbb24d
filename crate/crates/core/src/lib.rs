//! Typical-to-atypical voice conversion built around a diffusion decoder with a
//! data-dependent prior.
//!
//! The pipeline has four legs:
//!
//! * [`audio`] — waveform ingestion, mel analysis, Griffin-Lim inversion;
//! * [`align`] + [`encoder`] — phoneme statistics, the speaker-independent
//!   mel-spectrogram (SIMS) target, and the content encoder that predicts it
//!   together with frame-level phonemes and log-durations;
//! * [`stretch`] + [`diffusion`] — duration modification of the source audio and
//!   the reverse-SDE decoder that renders the target speaker from the SIMS prior;
//! * [`speaker`] + [`eval`] — embedding-based similarity and P-STOI/P-ESTOI
//!   intelligibility reporting, plus the batch augmentation generator.
//!
//! [`pipeline`] ties everything together behind a config file and the `dysvc`
//! command-line interface.

pub mod align;
pub mod audio;
mod container;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod eval;
pub mod seeds;
pub mod speaker;
pub mod synth;

pub use error::{Error, Result};
