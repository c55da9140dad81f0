//! Guided-Transformer feature distillation for unsupervised anomaly detection.
//!
//! A frozen guide backbone and a trainable student are compared through a
//! tokenizer, a transformer stack, and a token-to-pixel mapper. At test time
//! the guide/mapped discrepancy on each critical layer yields an anomaly map.

pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod export;
pub mod imgops;
pub mod mapper;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod runner;
pub mod scoring;
pub mod tfm;
pub mod tokenizer;
pub mod training;

pub use error::{Error, ErrorKind, Result};
