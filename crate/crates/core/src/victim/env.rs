use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::stats::{MeanSd, TruncatedNormal};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instrumentation {
    None,
    Tsgx,
}

impl fmt::Display for Instrumentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Instrumentation::None => "ideal",
            Instrumentation::Tsgx => "tsgx",
        })
    }
}

impl FromStr for Instrumentation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "ideal" => Ok(Instrumentation::None),
            "tsgx" | "t-sgx" => Ok(Instrumentation::Tsgx),
            _ => Err(Error::Config(format!("unknown instrumentation {s:?}"))),
        }
    }
}

/// Co-located load during a run. `Isolated` is a quiet core reserved by the
/// attacker, the setting attack campaigns run in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Workload {
    Idle,
    GccLike,
    RedisLike,
    Isolated,
}

impl Workload {
    pub const ALL: [Workload; 4] = [Workload::Idle, Workload::GccLike, Workload::RedisLike, Workload::Isolated];

    pub fn key(self) -> &'static str {
        match self {
            Workload::Idle => "idle",
            Workload::GccLike => "gcc",
            Workload::RedisLike => "redis",
            Workload::Isolated => "isolated",
        }
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Workload {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "idle" => Ok(Workload::Idle),
            "gcc" | "gcclike" | "gcc-like" => Ok(Workload::GccLike),
            "redis" | "redislike" | "redis-like" => Ok(Workload::RedisLike),
            "isolated" => Ok(Workload::Isolated),
            _ => Err(Error::Config(format!("unknown workload {s:?}"))),
        }
    }
}

/// Benign per-run metric distributions of one victim under one workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub aex: MeanSd,
    pub misses: MeanSd,
    pub time_ms: MeanSd,
}

impl BaselineRow {
    pub const ZERO: BaselineRow = BaselineRow {
        aex: MeanSd::new(0.0, 0.0),
        misses: MeanSd::new(0.0, 0.0),
        time_ms: MeanSd::new(0.0, 0.0),
    };

    pub fn draw_aex<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        TruncatedNormal::fit(self.aex).sample(rng).round() as u64
    }

    pub fn draw_misses<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        TruncatedNormal::fit(self.misses).sample(rng).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentProfile {
    pub instrumentation: Instrumentation,
    pub workload: Workload,
    pub baseline: BaselineRow,
    /// Deviation of the attacker's timer thread, in ticks.
    pub measurement_jitter: f64,
    /// Deviation of prime+probe access times.
    pub probe_noise: f64,
    pub tick_rate: f64,
    /// Restart delay after an abort, as fractions (mean, sd) of the segment.
    pub restart_delay: (f64, f64),
    /// Online exit-counter threshold of the instrumentation, if armed.
    pub tsgx_alarm: Option<u64>,
    pub seed: u64,
}

impl EnvironmentProfile {
    pub const DEFAULT_JITTER: f64 = 300.0;

    pub fn new(instrumentation: Instrumentation, workload: Workload, baseline: BaselineRow, seed: u64) -> Self {
        Self {
            instrumentation,
            workload,
            baseline,
            measurement_jitter: Self::DEFAULT_JITTER,
            probe_noise: 0.0,
            tick_rate: crate::timing::DEFAULT_TICK_RATE,
            restart_delay: (0.05, 0.02),
            tsgx_alarm: None,
            seed,
        }
    }

    /// No background activity, no timer or probe noise, no restart noise.
    pub fn zero_noise(instrumentation: Instrumentation, seed: u64) -> Self {
        Self {
            measurement_jitter: 0.0,
            restart_delay: (0.0, 0.0),
            ..Self::new(instrumentation, Workload::Idle, BaselineRow::ZERO, seed)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Environment of the `index`-th run of a campaign.
    pub fn for_run(&self, index: u64) -> Self {
        self.with_seed(self.seed ^ index)
    }

    pub fn is_tsgx(&self) -> bool {
        self.instrumentation == Instrumentation::Tsgx
    }
}
