//! Deception detection from behavioural cue tracks: frame selection,
//! segment encoding, identity-adversarial re-embedding and evaluation.

pub mod aligner;
pub mod config;
pub mod cues;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod probe;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
