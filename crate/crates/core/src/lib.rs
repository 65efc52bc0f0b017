//! Joint learning of basic expressions, facial action units and
//! valence/arousal with a shared-trunk network, plus the task-coupling losses
//! that tie expressions and action units together through a relatedness table.

pub mod coupling;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod relatedness;
pub mod synthdata;
pub mod trainer;
pub mod zeroshot;

pub use error::{Error, Result};
pub use exec::Exec;
pub use labels::{Emotion, CANONICAL_AUS, N_AUS, N_EMOTIONS};
