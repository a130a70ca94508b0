//! End-to-end bioacoustic call detection and classification.
//!
//! `callpipe` ingests audio recordings plus human annotations, trains small
//! convolutional classifiers over configurable spectro-temporal frontends with
//! waveform augmentations, and produces per-window detection probabilities,
//! evaluation metrics, Raven-compatible selection tables, and
//! hyperparameter-sweep leaderboards.
//!
//! The pipeline is composed of independent, interchangeable building blocks:
//!
//! * [`config`] — hierarchical experiment configuration (groups + overrides)
//! * [`audio`] — WAV decoding, resampling, channel mixdown
//! * [`dsp`] — spectrograms, mel projection, PCEN, normalizations
//! * [`annotations`] — annotation ingestion, segmentation, splits, sampling
//! * [`augment`] — SNR-calibrated noise, time and frequency masking
//! * [`nn`] — reverse-mode autodiff, layers, and the model zoo
//! * [`optim`] — SGD/Adam, exponential LR scheduling, trainability masks
//! * [`trainer`] — the training loop, metrics, checkpoints, experiment logs
//! * [`inference`] — sliding-window prediction, detection events, exports
//! * [`sweep`] — search spaces, random/grid search, hyperband early stopping
//!
//! A narrative guide with runnable examples lives in `book/`; its code
//! blocks double as doc-tests (see the `guide` module).

pub mod annotations;
pub mod audio;
pub mod augment;
pub mod cli;
pub mod config;
pub mod dsp;
pub mod error;
pub mod inference;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sweep;
pub mod trainer;

mod guide;

pub use error::{Error, Result};
