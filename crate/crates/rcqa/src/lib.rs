//! Risk-controlled question answering.
//!
//! This crate trains a small span-prediction reader on a synthetic keyed
//! extraction task, derives layerwise confidence signals from linear probes,
//! learns a convolutional confidence model over those signals, and turns
//! confidence scores into accept/reject decisions calibrated to a target
//! selective risk. Everything is deterministic given a seed.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decision;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod probes;
pub mod qualify;
pub mod report;

pub use error::{Error, Result};
