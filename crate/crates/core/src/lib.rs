//! Data-free class-incremental learning.
//!
//! A classifier learns a sequence of class-disjoint tasks without revisiting
//! past data. Past knowledge is replayed through images synthesized by
//! inverting the frozen previous model, and consolidated with a local
//! cross-entropy, importance-weighted feature distillation and head
//! fine-tuning. Baselines, metrics and drift diagnostics live alongside.

pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synthesis;
pub mod trainer;
pub mod seed;

pub use error::{Error, Result};
