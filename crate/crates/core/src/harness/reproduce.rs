//! Canned experiment grids for the published tables and figures.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::{AttackSpec, DetectorSweep, ExperimentConfig};
use super::experiment::{simulate, DetectionCsvRow, SummaryRow};
use crate::attacker::Strategy;
use crate::detector::DetectorFamily;
use crate::victim::{Instrumentation, Workload};
use crate::Error;

pub const TARGETS: [&str; 8] = ["table2", "table3", "table5", "fig9", "fig10", "fig11", "tsgx_gcc", "opencv_aex"];

/// Exit-counter threshold of the transactional tool in the instrumented rows.
pub const TSGX_ALARM: u64 = 10;
const CAMPAIGNS: usize = 10;

fn baseline(preset: &str, instr: Instrumentation, workloads: &[Workload], seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        instrumentation: instr,
        benign_workloads: workloads.to_vec(),
        seed,
        tsgx_alarm: (instr == Instrumentation::Tsgx).then_some(TSGX_ALARM),
        ..ExperimentConfig::new(preset)
    }
}

fn attack(preset: &str, instr: Instrumentation, spec: AttackSpec, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        instrumentation: instr,
        repetitions: CAMPAIGNS,
        seed,
        tsgx_alarm: (instr == Instrumentation::Tsgx).then_some(TSGX_ALARM),
        attack: Some(spec),
        ..ExperimentConfig::new(preset)
    }
}

fn attack_label(spec: &AttackSpec) -> String {
    match spec.strategy {
        Strategy::CacheOnly => format!("cache_only_w{}_k{}", spec.window, spec.samples),
        s if s.is_spread() => format!("{s}_k{}", spec.samples),
        s => s.to_string(),
    }
}

fn table(preset: &str, cache_window: usize, seed: u64) -> Vec<(String, ExperimentConfig)> {
    let workloads = [Workload::Idle, Workload::GccLike, Workload::RedisLike];
    let attacks = [
        AttackSpec::new(Strategy::PageFault, 1, 9),
        AttackSpec::new(Strategy::PageCache, 1, 9),
        AttackSpec::new(Strategy::CacheOnly, 1, 1),
        AttackSpec::new(Strategy::CacheOnly, cache_window, 9),
        AttackSpec::new(Strategy::StandardPage, 1, 1),
        AttackSpec::new(Strategy::StandardCache, 1, 1),
    ];
    let mut out = Vec::new();
    for instr in [Instrumentation::None, Instrumentation::Tsgx] {
        out.push((format!("{instr}_baseline"), baseline(preset, instr, &workloads, seed)));
        for spec in &attacks {
            out.push((format!("{instr}_{}", attack_label(spec)), attack(preset, instr, spec.clone(), seed)));
        }
    }
    out
}

fn detectors() -> Vec<DetectorSweep> {
    vec![
        DetectorSweep::range(DetectorFamily::IdealAex, 1.0, 40.0, 1.0),
        DetectorSweep::range(DetectorFamily::IdealCacheMiss, 100.0, 12000.0, 100.0),
    ]
}

/// Attack runs of one campaign swept against every benign workload.
fn sweep(
    preset: &str,
    instr: Instrumentation,
    spec: AttackSpec,
    workloads: &[Workload],
    families: Vec<DetectorSweep>,
    seed: u64,
) -> ExperimentConfig {
    ExperimentConfig {
        benign_workloads: workloads.to_vec(),
        detectors: families,
        repetitions: 1,
        tsgx_alarm: None,
        ..attack(preset, instr, spec, seed)
    }
}

const INSTRUMENTATIONS: [Instrumentation; 2] = [Instrumentation::None, Instrumentation::Tsgx];

/// Paper-scale window of the cache-only attack on each victim.
fn cache_window(preset: &str) -> usize {
    if preset == "ec" { 5 } else { 9 }
}

/// Accuracy against samples per segment for every spread strategy.
fn k_curve(seed: u64) -> Vec<(String, ExperimentConfig)> {
    let mut v = Vec::new();
    for preset in ["powm", "ec"] {
        for instr in INSTRUMENTATIONS {
            for k in [1, 3, 5, 7, 9] {
                for spec in [
                    AttackSpec::new(Strategy::PageFault, 1, k),
                    AttackSpec::new(Strategy::PageCache, 1, k),
                    AttackSpec::new(Strategy::CacheOnly, cache_window(preset), k),
                ] {
                    v.push((format!("{preset}_{instr}_{}", attack_label(&spec)), attack(preset, instr, spec, seed)));
                }
            }
        }
    }
    v
}

/// Cache-only accuracy against window size at one and nine samples.
fn window_curve(seed: u64) -> Vec<(String, ExperimentConfig)> {
    let mut v = Vec::new();
    for preset in ["powm", "ec"] {
        for instr in INSTRUMENTATIONS {
            for k in [1, 9] {
                for w in 1..=10 {
                    let spec = AttackSpec::new(Strategy::CacheOnly, w, k);
                    v.push((format!("{preset}_{instr}_{}", attack_label(&spec)), attack(preset, instr, spec, seed)));
                }
            }
        }
    }
    v
}

/// The experiments behind `target`, labelled.
pub fn canned(target: &str, seed: u64) -> Result<Vec<(String, ExperimentConfig)>, Error> {
    let all = [Workload::Idle, Workload::GccLike, Workload::RedisLike];
    let none = Instrumentation::None;
    let configs = match target {
        "table2" => table("powm", 9, seed),
        "table3" => table("ec", 5, seed),
        "table5" => vec![
            ("ideal_baseline".into(), baseline("opencv", none, &[Workload::Idle, Workload::GccLike], seed)),
            ("ideal_page_fault_k9".into(), attack("opencv", none, AttackSpec::new(Strategy::PageFault, 1, 9), seed)),
            ("ideal_standard_page".into(), attack("opencv", none, AttackSpec::new(Strategy::StandardPage, 1, 1), seed)),
        ],
        "fig9" => {
            let mut v = Vec::new();
            for preset in ["powm", "ec"] {
                for spec in [
                    AttackSpec::new(Strategy::PageFault, 1, 9),
                    AttackSpec::new(Strategy::CacheOnly, cache_window(preset), 9),
                ] {
                    let label = format!("{preset}_{}", attack_label(&spec));
                    v.push((label, sweep(preset, none, spec, &all, detectors(), seed)));
                }
            }
            v
        }
        "fig10" => k_curve(seed),
        "fig11" => window_curve(seed),
        "tsgx_gcc" => ["powm", "ec"]
            .into_iter()
            .map(|preset| {
                let spec = AttackSpec::new(Strategy::PageFault, 1, 9);
                let family = vec![DetectorSweep::range(DetectorFamily::TsgxAex, 1.0, 40.0, 1.0)];
                let config = sweep(preset, Instrumentation::Tsgx, spec.clone(), &[Workload::GccLike], family, seed);
                (format!("{preset}_{}", attack_label(&spec)), config)
            })
            .collect(),
        "opencv_aex" => vec![(
            "opencv_page_fault_k9".into(),
            sweep(
                "opencv",
                none,
                AttackSpec::new(Strategy::PageFault, 1, 9),
                &[Workload::Idle, Workload::GccLike],
                vec![DetectorSweep::range(DetectorFamily::IdealAex, 1.0, 40.0, 1.0)],
                seed,
            ),
        )],
        other => {
            return Err(Error::Config(format!("unknown reproduction target {other:?}; expected one of {TARGETS:?}")))
        }
    };
    Ok(configs)
}

/// Run every experiment of `target` into `out/<label>/`, then gather their
/// summaries into `out/<target>_summary.csv` and any detector sweeps into
/// `out/<target>_detection.csv`.
pub fn reproduce(target: &str, seed: u64, out: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut summary: Vec<(String, SummaryRow)> = Vec::new();
    let mut detection: Vec<(String, DetectionCsvRow)> = Vec::new();
    let mut written = Vec::new();
    for (label, config) in canned(target, seed)? {
        let result = simulate(&config)?;
        written.extend(result.write(&out.join(&label))?);
        summary.extend(result.summary.iter().cloned().map(|r| (label.clone(), r)));
        for d in &config.detectors {
            detection.extend(result.detection_rows(d.family).into_iter().map(|r| (label.clone(), r)));
        }
    }
    fs::create_dir_all(out)?;
    let path = out.join(format!("{target}_summary.csv"));
    write_labelled(&path, &summary)?;
    written.push(path);
    if !detection.is_empty() {
        let path = out.join(format!("{target}_detection.csv"));
        write_labelled(&path, &detection)?;
        written.push(path);
    }
    Ok(written)
}

/// Rows prefixed with an `experiment` column.
fn write_labelled<T: serde::Serialize>(path: &Path, rows: &[(String, T)]) -> Result<(), Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    let mut header_done = false;
    for (label, row) in rows {
        let mut buf = csv::Writer::from_writer(Vec::new());
        buf.serialize(row)?;
        let text = String::from_utf8(buf.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .expect("csv output is utf-8");
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if !header_done {
            w.write_record(std::iter::once("experiment").chain(header.split(',')))?;
            header_done = true;
        }
        let record: csv::StringRecord = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(lines.next().unwrap_or_default().as_bytes())
            .records()
            .next()
            .transpose()?
            .unwrap_or_default();
        w.write_record(std::iter::once(label.as_str()).chain(record.iter()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::PresetLibrary;

    #[test]
    fn canned_configs_validate() {
        let lib = PresetLibrary::builtin();
        for t in TARGETS {
            let configs = canned(t, 1).unwrap();
            assert!(!configs.is_empty());
            for (label, c) in configs {
                c.validate(&lib).unwrap_or_else(|e| panic!("{t}/{label}: {e}"));
            }
        }
        assert!(canned("table4", 1).is_err());
    }
}
