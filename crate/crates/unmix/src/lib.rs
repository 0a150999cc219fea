//! Multivariate time series forecasting by channel-time dual unmixing.
//!
//! The model factors a series two ways at once: along time into simplex-weighted
//! combinations of basis signals, and along channels into shared mixing
//! coefficients. Selective state-space (Mamba-style) encoders estimate the
//! factors that history and future share; the remaining factors are learned
//! directly. Everything runs on a small f64 tensor engine with reverse-mode
//! autodiff, so the whole pipeline is trainable and checkable on a desktop.

pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
