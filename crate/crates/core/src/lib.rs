//! Jamming detection for 5G NR synchronization signal blocks.
//!
//! The crate covers the full pipeline of an RF-domain jamming detector that
//! watches the SSB (the 240-subcarrier x 4-symbol block carrying PSS/SSS/PBCH):
//!
//! * [`waveform`] — PSS m-sequences, SSB resource grids, CP-OFDM modulation;
//! * [`channel`] — free-space path loss, tapped-delay-line fading, thermal
//!   noise, and jammer injection at a requested signal-to-jamming-plus-noise
//!   ratio (SJNR);
//! * [`sync`] — carrier-frequency-offset and symbol-timing recovery plus SSB
//!   extraction from a capture;
//! * [`features`] — PSS cross-correlations compressed by a two-stage Haar
//!   wavelet transform, and the energy-per-null-resource-element (EPNRE)
//!   probe, assembled into 5-row observation tensors;
//! * [`dnn`] — a from-scratch convolutional network (im2col-free strided-GEMM
//!   convolutions, batch norm, SGD with momentum) with both end-to-end and
//!   layer-wise cascade training;
//! * [`detector`] — the double-threshold two-network decision rule and its
//!   calibration;
//! * [`dataset`] — scenario synthesis, binary persistence, and IQ-CSV capture
//!   ingestion;
//! * [`eval`] — confusion matrices, ROC sweeps, and miss-rate profiles.
//!
//! All randomness is seeded explicitly; identical configurations and seeds
//! produce bit-identical observations, trained models, and decisions.

// Validation guards are written `!(x > 0.0)` on purpose: the negated form
// fails closed on NaN as well as on out-of-range values, which a flipped
// comparison would silently accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod dataset;
pub mod detector;
pub mod dnn;
pub mod error;
pub mod eval;
pub mod features;
mod fft;
mod rng;
pub mod sync;
pub mod waveform;

pub use channel::{
    ChannelConfig, ChannelProfile, Coverage, JammedSignal, JammerConfig, JammerKind, SsbLocation,
};
pub use dataset::{DatasetFile, IngestParams, ManifestEntry, ScenarioConfig, ScenarioDraw};
pub use detector::{Decision, DetectStats, Stage, ThresholdSet};
pub use dnn::{Layout, ModelParams, ScorePair, TrainConfig, TrainLog};
pub use error::{Error, Result};
pub use eval::{ConfusionMatrix, RocCurve, RocPoint, SjnrMissProfile};
pub use features::{FeatureExtractor, Label, ObsMeta, Observation};
pub use num_complex::Complex64;
pub use waveform::{Modulation, PssSequence, ResourceGrid, TimeSignal};
