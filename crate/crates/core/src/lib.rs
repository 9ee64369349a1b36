//! Frame-level polyphonic music transcription.
//!
//! The pipeline reads 44.1 kHz mono audio, cuts it into 16,384-sample frames,
//! maps each frame through a layer-one filterbank (STFT, log-spaced, windowed
//! or learned), and predicts a 128-note binary label vector for the frame
//! midpoint. The network families are two-layer linear classifiers, three-layer
//! networks, the translation-invariant network that convolves along the
//! log-frequency axis, and its end-to-end channel-convolution sibling.
//!
//! Training uses minibatch SGD with momentum and an exponential moving
//! average of iterates; pitch-shift augmentation resamples audio by
//! `2^(s/12)` with matching label shifts. Evaluation reports pooled average
//! precision plus frame-level accuracy and total error at a global threshold.

pub mod audio;
pub mod augment;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod filterbank;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod train;

pub use error::{Error, Result};

/// Sample rate every recording must have.
pub const SAMPLE_RATE: u32 = 44_100;

/// Number of MIDI notes in a label vector.
pub const N_NOTES: usize = 128;
