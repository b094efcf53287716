//! Presets, experiment configs and grids, and their report files.

mod config;
mod experiment;
mod presets;
mod reproduce;

pub use config::{AttackSpec, DetectorSweep, ExperimentConfig};
pub use experiment::{
    base_seed, benign_run_index, campaign_seed, run_experiment, simulate, summarize, sweep_thresholds, with_jobs,
    CampaignRecord, DetectionCsvRow, DetectionSet, ExperimentResult, RecoverySummary, RunRow, SummaryRow, NO_ATTACK,
};
pub use presets::{sample_background, PresetLibrary, VictimPreset, BUILTIN_PRESETS};
pub use reproduce::{canned, reproduce, TARGETS, TSGX_ALARM};
