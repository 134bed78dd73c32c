//! End-to-end person search: joint detection and re-identification with a
//! one-step transformer head, plus a synthetic benchmark to train and
//! evaluate it on.
//!
//! The crate is self-contained: numerics with reverse-mode autodiff, the
//! detection transformer, the re-identification decoder, Hungarian matching
//! and losses, a deterministic scene generator, training, and retrieval
//! evaluation.

pub mod attention;
pub mod bank;
pub mod boxes;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod detector;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod reid;
pub mod error;
pub mod matcher;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
