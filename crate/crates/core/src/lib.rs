//! Discrete-event simulation of enclave side-channel attacks that spread
//! their leakage over many victim runs, and of the threshold detectors
//! meant to catch them.
//!
//! The crate is organised bottom-up:
//!
//! * [`timing`]: secrets, ticks and the per-segment timing model.
//! * [`victim`]: victim enclaves, the execution engine and profiling.
//! * [`channels`]: page traps and prime+probe.
//! * [`attacker`]: per-segment attacks, windowing, voting and recovery.
//! * [`detector`]: threshold detectors and their recall/specificity.
//! * [`harness`]: presets, experiment grids, CSV/JSON output.

pub mod attacker;
pub mod channels;
pub mod detector;
pub mod harness;
pub mod stats;
pub mod timing;
pub mod victim;

pub use timing::{BitString, RunMetrics, SegmentTimingModel, Tick};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid secret: {0}")]
    InvalidSecret(String),
    #[error("invalid timing model: {0}")]
    InvalidModel(String),
    #[error("victim: {0}")]
    Victim(String),
    #[error("channel: {0}")]
    Channel(String),
    #[error("attack configuration: {0}")]
    Attack(String),
    #[error("preset: {0}")]
    Preset(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
