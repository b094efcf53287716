//! Built-in victim constants and benign baselines, loaded from TOML.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;
use toml::{Table, Value};

use crate::stats::{MeanSd, TruncatedNormal};
use crate::timing::RunMetrics;
use crate::victim::{
    build_victim, instrument_tsgx, BaselineRow, ConstantsTable, EnvironmentProfile, Instrumentation, VictimKind,
    VictimModel, Workload,
};
use crate::Error;

pub const BUILTIN_PRESETS: &str = include_str!("../../presets/victims.toml");

/// Keys of a victim section that configure the environment, not the victim.
const ENV_KEYS: [&str; 2] = ["kind", "probe_noise"];

#[derive(Debug, Clone, Serialize)]
pub struct VictimPreset {
    pub name: String,
    pub kind: VictimKind,
    /// Ideal constants under plain keys, instrumented ones under `tsgx_`.
    pub constants: ConstantsTable,
    pub probe_noise: f64,
    pub baselines: Vec<(Instrumentation, Workload, BaselineRow)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PresetLibrary {
    pub victims: BTreeMap<String, VictimPreset>,
}

fn number(v: &Value, key: &str) -> Result<f64, Error> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .ok_or_else(|| Error::Preset(format!("`{key}` is not a number")))
}

fn mean_sd(row: &Table, key: &str, ctx: &str) -> Result<MeanSd, Error> {
    let pair = row
        .get(key)
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| Error::Preset(format!("{ctx}: `{key}` must be [mean, sd]")))?;
    Ok(MeanSd::new(number(&pair[0], key)?, number(&pair[1], key)?))
}

fn parse_baselines(
    section: &Table,
    instr: Instrumentation,
    ctx: &str,
    out: &mut Vec<(Instrumentation, Workload, BaselineRow)>,
) -> Result<(), Error> {
    let Some(rows) = section.get("baseline") else { return Ok(()) };
    let rows = rows.as_table().ok_or_else(|| Error::Preset(format!("{ctx}.baseline must be a table")))?;
    for (name, row) in rows {
        let workload: Workload = name.parse()?;
        let row = row.as_table().ok_or_else(|| Error::Preset(format!("{ctx}.baseline.{name} must be a table")))?;
        let ctx = format!("{ctx}.baseline.{name}");
        out.push((
            instr,
            workload,
            BaselineRow {
                aex: mean_sd(row, "aex", &ctx)?,
                misses: mean_sd(row, "misses", &ctx)?,
                time_ms: mean_sd(row, "time_ms", &ctx)?,
            },
        ));
    }
    Ok(())
}

fn parse_victim(name: &str, section: &Table) -> Result<VictimPreset, Error> {
    let kind: VictimKind = section
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Preset(format!("{name}: missing `kind`")))?
        .parse()?;
    let probe_noise = section.get("probe_noise").map(|v| number(v, "probe_noise")).transpose()?.unwrap_or(0.0);
    let mut constants = ConstantsTable::new();
    let mut baselines = Vec::new();
    for (key, value) in section {
        if ENV_KEYS.contains(&key.as_str()) {
            continue;
        }
        match value {
            Value::Table(sub) => {
                let (instr, prefix) = match key.as_str() {
                    "ideal" => (Instrumentation::None, ""),
                    "tsgx" => (Instrumentation::Tsgx, "tsgx_"),
                    other => return Err(Error::Preset(format!("{name}: unknown section `{other}`"))),
                };
                for (k, v) in sub {
                    if k != "baseline" {
                        constants.insert(format!("{prefix}{k}"), number(v, k)?);
                    }
                }
                parse_baselines(sub, instr, &format!("{name}.{key}"), &mut baselines)?;
            }
            v => {
                constants.insert(key.clone(), number(v, key)?);
            }
        }
    }
    Ok(VictimPreset { name: name.to_string(), kind, constants, probe_noise, baselines })
}

impl PresetLibrary {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_PRESETS).expect("built-in presets parse")
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let table: Table = text.parse().map_err(|e| Error::Preset(format!("{e}")))?;
        let mut victims = BTreeMap::new();
        for (name, section) in &table {
            let section = section.as_table().ok_or_else(|| Error::Preset(format!("`{name}` must be a table")))?;
            victims.insert(name.clone(), parse_victim(name, section)?);
        }
        Ok(Self { victims })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, Error> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, name: &str) -> Result<&VictimPreset, Error> {
        self.victims.get(name).ok_or_else(|| Error::Preset(format!("no preset named `{name}`")))
    }
}

impl VictimPreset {
    /// The victim, instrumented if asked.
    pub fn victim(&self, instr: Instrumentation) -> Result<VictimModel, Error> {
        let v = build_victim(self.kind, &self.constants)?;
        match instr {
            Instrumentation::None => Ok(v),
            Instrumentation::Tsgx => instrument_tsgx(&v),
        }
    }

    pub fn baseline(&self, instr: Instrumentation, workload: Workload) -> Result<BaselineRow, Error> {
        self.baselines
            .iter()
            .find(|(i, w, _)| *i == instr && *w == workload)
            .map(|(_, _, row)| *row)
            .ok_or_else(|| Error::Preset(format!("{}: no baseline for {instr}/{}", self.name, workload.key())))
    }

    pub fn environment(&self, instr: Instrumentation, workload: Workload, seed: u64) -> Result<EnvironmentProfile, Error> {
        let mut env = EnvironmentProfile::new(instr, workload, self.baseline(instr, workload)?, seed);
        env.probe_noise = self.probe_noise;
        Ok(env)
    }
}

/// Metrics of one benign run: each metric drawn from its fitted
/// zero-truncated Gaussian.
pub fn sample_background<R: Rng + ?Sized>(
    workload: Workload,
    preset: &VictimPreset,
    instr: Instrumentation,
    rng: &mut R,
) -> Result<RunMetrics, Error> {
    let row = preset.baseline(instr, workload)?;
    Ok(RunMetrics {
        aex_count: row.draw_aex(rng),
        l3_misses: row.draw_misses(rng),
        wall_time: TruncatedNormal::fit(row.time_ms).sample(rng),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builtin_presets_build() {
        let lib = PresetLibrary::builtin();
        for name in ["powm", "ec", "opencv"] {
            let p = lib.get(name).unwrap();
            p.victim(Instrumentation::None).unwrap();
            p.environment(Instrumentation::None, Workload::Idle, 1).unwrap();
        }
        for name in ["powm", "ec"] {
            let v = lib.get(name).unwrap().victim(Instrumentation::Tsgx).unwrap();
            assert!(v.instrumented);
        }
    }

    #[test]
    fn missing_row_is_an_error() {
        let lib = PresetLibrary::builtin();
        let opencv = lib.get("opencv").unwrap();
        assert!(matches!(opencv.baseline(Instrumentation::None, Workload::RedisLike), Err(Error::Preset(_))));
        assert!(opencv.victim(Instrumentation::Tsgx).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_background(Workload::RedisLike, opencv, Instrumentation::None, &mut rng).is_err());
    }

    #[test]
    fn tsgx_constants_are_prefixed() {
        let lib = PresetLibrary::builtin();
        let c = &lib.get("powm").unwrap().constants;
        assert_eq!(c["c_base"], 46_400.0);
        assert_eq!(c["tsgx_c_base"], 48_300.0);
        assert_eq!(c["tsgx_c_branch"], 54_900.0);
    }

    #[test]
    fn background_matches_row_moments() {
        let lib = PresetLibrary::builtin();
        let powm = lib.get("powm").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws: Vec<RunMetrics> = (0..20_000)
            .map(|_| sample_background(Workload::GccLike, powm, Instrumentation::None, &mut rng).unwrap())
            .collect();
        let times: Vec<f64> = draws.iter().map(|m| m.wall_time).collect();
        let aex: Vec<f64> = draws.iter().map(|m| m.aex_count as f64).collect();
        assert!((crate::stats::mean(&times) - 5.78).abs() < 0.01);
        assert!((crate::stats::mean(&aex) - 14.44).abs() < 0.5);
        assert!((crate::stats::std_dev(&aex) - 10.97).abs() < 0.5);
    }
}
