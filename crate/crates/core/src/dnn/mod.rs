//! Neural classifier over detection tensors.
//!
//! The network consumes the 5-row observation tensor produced by the
//! feature pipeline and emits softmax evidence for the jammed and clean
//! hypotheses. Three valid-padding convolution blocks (conv → batch norm →
//! ReLU) feed a two-layer fully connected classifier; see [`Layout`] for the
//! shape bookkeeping.
//!
//! Training minimizes mean negative log-likelihood with minibatch momentum
//! SGD, either jointly ([`train`]) or block by block ([`cascade_train`]),
//! and is bit-reproducible for a given seed at any thread count. Analytic
//! gradients are verifiable against central finite differences with
//! [`gradient_check`]. Trained models round-trip losslessly through a
//! little-endian binary format via [`save_model`] / [`load_model`].
//!
//! Linear algebra runs on CBLAS by default (`openblas` feature); the
//! `pure-rust` feature swaps in a Rust GEMM so the crate builds without
//! system libraries.

mod gemm;
mod io;
mod model;
mod scalar;
mod train;

pub use io::{load_model, save_model};
pub use model::{
    BatchNorm, Conv, Fc, Layout, ModelParams, TrainCache, BN_EPS, BN_MOMENTUM, DEFAULT_CHANNELS,
    DEFAULT_FC_HIDDEN, KERNELS, N_CLASSES,
};
pub use scalar::Scalar;
pub use train::{
    cascade_train, gradient_check, nll_loss, score, train, ScorePair, TrainConfig, TrainLog,
    ValRecord,
};
