//! Rank-consistent ordinal severity scoring of oscillatory motion in short videos.
//!
//! Frames become Horn–Schunck optical-flow volumes ([`flow`]), a small 3D
//! convolutional network ([`net`]) maps each volume to one shared logit, and a
//! monotone-bias ordinal head ([`ordinal`]) turns it into `m − 1` "rank > k"
//! probabilities. [`synth`] and [`dataset`] provide a seeded synthetic corpus
//! and its on-disk formats; [`train`] and [`eval`] run the experiments.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flow;
pub mod net;
pub mod ordinal;
pub mod scalar;
pub mod synth;
pub mod train;

pub use error::{Error, FormatError, Result};
