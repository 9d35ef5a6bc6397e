//! Heterogeneous target speech separation laboratory.
//!
//! Synthesizes conditional two-speaker mixtures under controllable concept
//! priors (energy, gender, spatial location, language), trains a
//! FiLM-conditioned separation network and a permutation-invariant baseline
//! on them, and evaluates with median SI-SDR.
//!
//! Module map:
//!
//! * [`signal`]: waveform type, energy/SNR arithmetic, SI-SDR, mixture consistency
//! * [`wav`]: single-channel WAV I/O
//! * [`acoustics`]: shoebox rooms, image-source RIRs, source placement
//! * [`conditions`]: concept vocabulary, one-hot encoding, target submix
//! * [`corpus`]: manifests, speaker splits, synthetic toy corpus
//! * [`mixgen`]: index-keyed on-the-fly mixture sampling
//! * [`nn`] and [`model`]: tape autograd and the separation network
//! * [`training`]: losses, learning-rate schedule, Adam, epoch loop
//! * [`evaluation`]: median SI-SDR reports
//! * [`experiments`]: config files, sweeps, CSV and plot emission

pub mod acoustics;
pub mod conditions;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod mixgen;
pub mod model;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod training;
pub mod wav;

pub use error::{Error, Result};
pub use signal::Waveform;

/// Default sample rate of every waveform in the pipeline.
pub const SAMPLE_RATE: u32 = 8000;
/// Default clip length: 4 s at 8 kHz.
pub const DEFAULT_CLIP_SAMPLES: usize = 32_000;
