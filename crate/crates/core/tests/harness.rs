use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spreadsim::attacker::Strategy;
use spreadsim::detector::DetectorFamily;
use spreadsim::harness::{
    run_experiment, sample_background, simulate, summarize, sweep_thresholds, with_jobs, AttackSpec, DetectorSweep,
    ExperimentConfig, PresetLibrary, RunRow, SummaryRow,
};
use spreadsim::stats::{mean, MeanSd};
use spreadsim::victim::{Instrumentation, Workload};

fn config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        benign_workloads: vec![Workload::Idle, Workload::RedisLike],
        benign_runs: 60,
        repetitions: 2,
        seed: 99,
        n_segments: Some(24),
        out: Some(out.to_path_buf()),
        attack: Some(AttackSpec::new(Strategy::CacheOnly, 3, 3)),
        detectors: vec![
            DetectorSweep::range(DetectorFamily::IdealAex, 1.0, 8.0, 1.0),
            DetectorSweep::range(DetectorFamily::IdealCacheMiss, 100.0, 1200.0, 100.0),
        ],
        ..ExperimentConfig::new("powm")
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn outputs_are_byte_identical_across_reruns_and_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    with_jobs(Some(1), || run_experiment(&config(a.path()))).unwrap().unwrap();
    with_jobs(Some(4), || run_experiment(&config(b.path()))).unwrap().unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["detection_ideal_aex.csv", "detection_ideal_cache_miss.csv", "recovery.json", "runs.csv", "summary.csv"]
    );
    assert_eq!(fa, fb);

    let c = tempfile::tempdir().unwrap();
    run_experiment(&ExperimentConfig { seed: 100, ..config(c.path()) }).unwrap();
    assert_ne!(fs::read(a.path().join("runs.csv")).unwrap(), fs::read(c.path().join("runs.csv")).unwrap());
}

#[test]
fn summary_equals_recomputation_from_runs_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    run_experiment(&cfg).unwrap();
    let runs: Vec<RunRow> =
        csv::Reader::from_path(dir.path().join("runs.csv")).unwrap().deserialize().collect::<Result<_, _>>().unwrap();
    let summary: Vec<SummaryRow> =
        csv::Reader::from_path(dir.path().join("summary.csv")).unwrap().deserialize().collect::<Result<_, _>>().unwrap();
    // Windows of 3 end at segments 3..=24; each takes k to 2k runs.
    assert_eq!(runs.iter().filter(|r| r.campaign == 0).count(), 2 * 60);
    let attack = runs.len() - 2 * 60;
    assert!((2 * 22 * 3..=2 * 22 * 6).contains(&attack), "{attack}");
    assert_eq!(summarize(&cfg, &runs), summary);
}

#[test]
fn detection_csv_has_fixed_columns() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&config(dir.path())).unwrap();
    let text = fs::read_to_string(dir.path().join("detection_ideal_aex.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "victim,workload,family,threshold,recall,specificity,n_attack,n_benign");
    // 8 thresholds against each of two benign workloads.
    assert_eq!(text.lines().count(), 1 + 16);
    let sweeps = sweep_thresholds(&config(&dir.path().join("sweeps"))).unwrap();
    let names: Vec<String> = sweeps.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert!(names.contains(&"sweep_ideal_cache_miss_powm_redis.csv".to_string()), "{names:?}");
    assert_eq!(names.len(), 4);
}

#[test]
fn config_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_experiment(&ExperimentConfig { preset: "bogus".into(), ..config(dir.path()) }).is_err());
    let file = dir.path().join("file");
    fs::write(&file, "x").unwrap();
    assert!(run_experiment(&config(&file.join("sub"))).is_err());
}

/// Benign draws reproduce the preset rows' means.
#[test]
fn background_draws_match_rows() {
    let lib = PresetLibrary::builtin();
    let powm = lib.get("powm").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let redis: Vec<f64> = (0..1000)
        .map(|_| sample_background(Workload::RedisLike, powm, Instrumentation::None, &mut rng).unwrap().l3_misses as f64)
        .collect();
    assert!((mean(&redis) - 6007.21).abs() < 3.0 * 510.83 / 1000f64.sqrt(), "{}", mean(&redis));
    let idle: Vec<f64> = (0..1000)
        .map(|_| sample_background(Workload::Idle, powm, Instrumentation::None, &mut rng).unwrap().aex_count as f64)
        .collect();
    assert!((mean(&idle) - 2.441).abs() < 3.0 * 1.93 / 1000f64.sqrt(), "{}", mean(&idle));
}

#[test]
fn zero_sd_rows_draw_constants() {
    let text = spreadsim::harness::BUILTIN_PRESETS
        .replace("idle = { aex = [2.441, 1.93], misses = [123.27, 82.91]", "idle = { aex = [3, 0], misses = [100, 0]");
    let lib = PresetLibrary::from_toml(&text).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let m = sample_background(Workload::Idle, lib.get("powm").unwrap(), Instrumentation::None, &mut rng).unwrap();
        assert_eq!((m.aex_count, m.l3_misses), (3, 100));
    }
}

/// Simulated no-attack runs land within three standard errors of every
/// preset row, except the instrumented powm run times: the instrumented
/// constants alone already take longer than that row's mean.
#[test]
fn no_attack_runs_match_every_preset_row() {
    let lib = PresetLibrary::builtin();
    let mut failures = Vec::new();
    for (name, preset) in &lib.victims {
        for &(instr, workload, row) in &preset.baselines {
            let c = ExperimentConfig {
                instrumentation: instr,
                benign_workloads: vec![workload],
                benign_runs: 1000,
                seed: 17,
                ..ExperimentConfig::new(name)
            };
            let s = &simulate(&c).unwrap().summary[0];
            // Standard error of the simulated mean; exits add run-time spread
            // some rows leave out of their time deviation.
            let check = |what: &str, got: f64, want: MeanSd, sim_sd: f64| {
                let se = want.sd.max(sim_sd) / 1000f64.sqrt();
                ((got - want.mean).abs() > 3.0 * se).then(|| format!("{name}/{instr}/{workload} {what}: {got} vs {want:?}"))
            };
            failures.extend(check("aex", s.aex_mean, row.aex, s.aex_sd));
            failures.extend(check("misses", s.misses_mean, row.misses, s.misses_sd));
            if let Some(f) = check("time", s.time_ms_mean, row.time_ms, s.time_ms_sd) {
                if name == "powm" && instr == Instrumentation::Tsgx {
                    let victim = preset.victim(instr).unwrap();
                    let floor = victim.nominal_duration().as_f64() / spreadsim::timing::DEFAULT_TICK_RATE * 1e3;
                    assert!(floor > row.time_ms.mean, "{f}");
                    continue;
                }
                failures.push(f);
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
