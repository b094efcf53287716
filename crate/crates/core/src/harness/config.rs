//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::presets::PresetLibrary;
use crate::attacker::{AttackConfig, Strategy};
use crate::detector::{DetectorConfig, DetectorFamily};
use crate::timing::Tick;
use crate::victim::{Instrumentation, Workload};
use crate::Error;

/// (De)serialize through `Display`/`FromStr`, so files use the short keys.
mod keyed {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<T: Display, S: Serializer>(v: &[T], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(|x| x.to_string()))
        }

        pub fn deserialize<'de, T, D>(d: D) -> Result<Vec<T>, D::Error>
        where
            T: FromStr,
            T::Err: Display,
            D: Deserializer<'de>,
        {
            Vec::<String>::deserialize(d)?.iter().map(|s| s.parse().map_err(de::Error::custom)).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    #[serde(with = "keyed")]
    pub strategy: Strategy,
    #[serde(default = "one")]
    pub window: usize,
    #[serde(default = "nine")]
    pub samples: usize,
    pub stop_margin: Option<u64>,
    pub callee_runtime: Option<u64>,
}

impl AttackSpec {
    pub fn new(strategy: Strategy, window: usize, samples: usize) -> Self {
        Self { strategy, window, samples, stop_margin: None, callee_runtime: None }
    }

    pub fn config(&self) -> AttackConfig {
        AttackConfig {
            strategy: self.strategy,
            window: self.window,
            samples: self.samples,
            stop_margin: self.stop_margin.map(Tick),
            callee_runtime: self.callee_runtime.map(Tick),
        }
    }
}

/// One detector family and its thresholds, either listed or as an
/// inclusive `[from, to, step]` range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSweep {
    pub family: DetectorFamily,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub thresholds: Vec<f64>,
    pub range: Option<[f64; 3]>,
}

impl DetectorSweep {
    pub fn range(family: DetectorFamily, from: f64, to: f64, step: f64) -> Self {
        Self { family, thresholds: Vec::new(), range: Some([from, to, step]) }
    }

    pub fn grid(&self) -> Result<Vec<f64>, Error> {
        let mut grid = self.thresholds.clone();
        if let Some([from, to, step]) = self.range {
            if !(step > 0.0) || !(to >= from) {
                return Err(Error::Config(format!("{}: bad range [{from}, {to}, {step}]", self.family)));
            }
            let n = ((to - from) / step + 1e-9).floor() as usize;
            grid.extend((0..=n).map(|i| from + i as f64 * step));
        }
        if grid.is_empty() {
            return Err(Error::Config(format!("{}: empty threshold grid", self.family)));
        }
        for &t in &grid {
            DetectorConfig::new(self.family, t)?;
        }
        Ok(grid)
    }
}

fn one() -> usize {
    1
}

fn nine() -> usize {
    9
}

fn thousand() -> usize {
    1000
}

fn isolated() -> Workload {
    Workload::Isolated
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Victim preset name.
    pub preset: String,
    /// Preset file replacing the built-in presets.
    pub preset_file: Option<PathBuf>,
    #[serde(with = "keyed", default = "ideal")]
    pub instrumentation: Instrumentation,
    /// Workload the attack campaigns run under.
    #[serde(with = "keyed", default = "isolated")]
    pub workload: Workload,
    /// Workloads of the benign (no attack) runs.
    #[serde(with = "keyed::vec", default)]
    pub benign_workloads: Vec<Workload>,
    /// Benign runs per benign workload.
    #[serde(default = "thousand")]
    pub benign_runs: usize,
    /// Attack campaigns, each against a fresh secret.
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    /// Segments per run; the preset's count when absent.
    pub n_segments: Option<usize>,
    /// Fixed secret in hex for every campaign, bit-serial victims only.
    pub secret: Option<String>,
    /// Online exit-counter alarm of the instrumentation.
    pub tsgx_alarm: Option<u64>,
    pub out: Option<PathBuf>,
    pub attack: Option<AttackSpec>,
    #[serde(default)]
    pub detectors: Vec<DetectorSweep>,
}

fn ideal() -> Instrumentation {
    Instrumentation::None
}

impl ExperimentConfig {
    /// A config with defaults for everything but the preset.
    pub fn new(preset: &str) -> Self {
        Self {
            preset: preset.to_string(),
            preset_file: None,
            instrumentation: Instrumentation::None,
            workload: Workload::Isolated,
            benign_workloads: Vec::new(),
            benign_runs: 1000,
            repetitions: 1,
            seed: 0,
            n_segments: None,
            secret: None,
            tsgx_alarm: None,
            out: None,
            attack: None,
            detectors: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let mut config = Self::from_toml(&std::fs::read_to_string(path)?)?;
        // Relative preset files resolve against the config's directory.
        if let (Some(file), Some(dir)) = (&config.preset_file, path.parent()) {
            if file.is_relative() {
                config.preset_file = Some(dir.join(file));
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn library(&self) -> Result<PresetLibrary, Error> {
        match &self.preset_file {
            Some(path) => PresetLibrary::load(path),
            None => Ok(PresetLibrary::builtin()),
        }
    }

    /// Check the config against `library`.
    pub fn validate(&self, library: &PresetLibrary) -> Result<(), Error> {
        let preset = library.get(&self.preset)?;
        let victim = preset.victim(self.instrumentation)?;
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.n_segments == Some(0) {
            return Err(Error::Config("n_segments must be at least 1".into()));
        }
        if !self.benign_workloads.is_empty() && self.benign_runs == 0 {
            return Err(Error::Config("benign_runs must be at least 1".into()));
        }
        for &w in &self.benign_workloads {
            preset.baseline(self.instrumentation, w)?;
        }
        if let Some(attack) = &self.attack {
            preset.baseline(self.instrumentation, self.workload)?;
            attack.config().validate()?;
            if !victim.is_bit_serial() && !matches!(attack.strategy, Strategy::PageFault | Strategy::StandardPage) {
                return Err(Error::Config(format!("{} does not apply to {}", attack.strategy, self.preset)));
            }
        }
        if let Some(hex) = &self.secret {
            if !victim.is_bit_serial() {
                return Err(Error::Config("a fixed hex secret needs a bit-serial victim".into()));
            }
            crate::BitString::from_hex(hex, self.n_segments.unwrap_or(victim.n_segments))?;
        }
        if !self.detectors.is_empty() && (self.attack.is_none() || self.benign_workloads.is_empty()) {
            return Err(Error::Config("detector sweeps need an attack and benign workloads".into()));
        }
        for d in &self.detectors {
            d.grid()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
preset = "powm"
instrumentation = "ideal"
benign_workloads = ["idle", "gcc"]
benign_runs = 50
repetitions = 2
seed = 7

[attack]
strategy = "page-fault"
samples = 3

[[detectors]]
family = "ideal_aex"
range = [2, 10, 1]

[[detectors]]
family = "ideal_cache_miss"
thresholds = [100, 800]
"#;

    #[test]
    fn parses_and_validates() {
        let c = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(c.workload, Workload::Isolated);
        assert_eq!(c.benign_workloads, vec![Workload::Idle, Workload::GccLike]);
        assert_eq!(c.attack.as_ref().unwrap().config(), AttackConfig::new(Strategy::PageFault, 3));
        assert_eq!(c.detectors[0].grid().unwrap(), (2..=10).map(f64::from).collect::<Vec<_>>());
        c.validate(&PresetLibrary::builtin()).unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_configs() {
        let lib = PresetLibrary::builtin();
        let base = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let bad = [
            ExperimentConfig { repetitions: 0, ..base.clone() },
            ExperimentConfig { preset: "nope".into(), ..base.clone() },
            ExperimentConfig { benign_workloads: vec![Workload::RedisLike], preset: "opencv".into(), ..base.clone() },
            ExperimentConfig { benign_workloads: vec![], ..base.clone() },
            ExperimentConfig { detectors: vec![DetectorSweep::range(DetectorFamily::IdealAex, 5.0, 2.0, 1.0)], ..base.clone() },
            ExperimentConfig {
                detectors: vec![DetectorSweep { family: DetectorFamily::IdealAex, thresholds: vec![], range: None }],
                ..base.clone()
            },
        ];
        for c in bad {
            assert!(c.validate(&lib).is_err(), "{c:?}");
        }
        assert!(ExperimentConfig::from_toml("preset = \"powm\"\nbogus = 1").is_err());
    }
}
