//! Running an experiment grid and writing its report files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AttackSpec, ExperimentConfig};
use crate::attacker::recover_secret;
use crate::detector::{evaluate_detector, DetectionReport, DetectorFamily};
use crate::stats::{mean, std_dev};
use crate::timing::{BitString, RunMetrics};
use crate::victim::{execute_run, NoAdversary, VictimModel, Workload};
use crate::Error;

pub const NO_ATTACK: &str = "no_attack";

/// Flag bit separating benign run indices from attack ones.
const BENIGN_RUNS: u64 = 1 << 63;
/// RNG stream of the secrets drawn for campaigns and benign runs.
const SECRET_STREAM: u64 = 6;

/// One victim run; a row of `runs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    /// `no_attack` or the attack strategy.
    pub condition: String,
    pub workload: String,
    /// 1-based attack campaign, 0 for benign runs.
    pub campaign: usize,
    /// Targeted segment, 0 when the run targets none.
    pub target: usize,
    pub seed: u64,
    pub aex: u64,
    pub l3_misses: u64,
    pub time_ms: f64,
    pub aex_delta: u64,
    pub alarm: bool,
    pub segments_completed: usize,
    /// Accuracy of the run's campaign.
    pub campaign_accuracy: Option<f64>,
}

impl RunRow {
    pub fn metrics(&self) -> RunMetrics {
        RunMetrics { aex_count: self.aex, l3_misses: self.l3_misses, wall_time: self.time_ms }
    }
}

/// One (condition, workload) group; a row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub victim: String,
    pub instrumentation: String,
    pub workload: String,
    pub condition: String,
    pub window: Option<usize>,
    pub samples: Option<usize>,
    pub campaigns: usize,
    pub runs: usize,
    pub accuracy_mean: Option<f64>,
    pub accuracy_sd: Option<f64>,
    pub aex_mean: f64,
    pub aex_sd: f64,
    pub misses_mean: f64,
    pub misses_sd: f64,
    pub time_ms_mean: f64,
    pub time_ms_sd: f64,
    pub aex_delta_mean: f64,
    pub aex_delta_max: u64,
}

/// A row of `detection_<family>.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionCsvRow {
    pub victim: String,
    pub workload: String,
    pub family: DetectorFamily,
    pub threshold: f64,
    pub recall: f64,
    pub specificity: f64,
    pub n_attack: usize,
    pub n_benign: usize,
}

/// A detector sweep of the attack runs against one benign workload.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub workload: Workload,
    pub report: DetectionReport,
}

/// One recovery campaign, without its runs (those go to `runs.csv`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignRecord {
    pub campaign: usize,
    pub seed: u64,
    /// Hex for bit-serial victims, comma-separated labels otherwise.
    pub truth: String,
    pub recovered: String,
    pub accuracy: f64,
    pub undecided: usize,
    pub alarm: bool,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub victim: String,
    pub instrumentation: String,
    pub workload: String,
    pub strategy: String,
    pub window: usize,
    pub samples: usize,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    pub campaigns: Vec<CampaignRecord>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub runs: Vec<RunRow>,
    pub summary: Vec<SummaryRow>,
    pub detection: Vec<DetectionSet>,
    pub recovery: Option<RecoverySummary>,
}

/// Run `f` on a pool of `jobs` threads, or on the global pool.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Error> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn random_secret(victim: &VictimModel, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SECRET_STREAM);
    let alphabet = victim.alphabet() as u8;
    (0..victim.n_segments).map(|_| rng.random_range(0..alphabet)).collect()
}

/// The key of benign runs: random, but for bit-serial victims with exactly
/// half its bits set, the weight the presets' run times are quoted at.
fn benign_secret(victim: &VictimModel, seed: u64) -> Vec<u8> {
    if !victim.is_bit_serial() {
        return random_secret(victim, seed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SECRET_STREAM);
    let n = victim.n_segments;
    let mut s: Vec<u8> = (0..n).map(|j| u8::from(j < n / 2)).collect();
    s.shuffle(&mut rng);
    s
}

fn render(victim: &VictimModel, symbols: &[u8]) -> String {
    if victim.is_bit_serial() {
        if let Ok(bits) = BitString::new(symbols.to_vec()) {
            return bits.to_hex();
        }
    }
    symbols.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

fn workload_index(w: Workload) -> u64 {
    Workload::ALL.iter().position(|&x| x == w).expect("listed") as u64
}

/// Spread an experiment seed over all 64 bits, so that nearby seeds do not
/// just permute each other's `seed ^ run_index` sets.
pub fn base_seed(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed offset of benign run `j` under `workload`.
pub fn benign_run_index(workload: Workload, j: usize) -> u64 {
    BENIGN_RUNS | workload_index(workload) << 40 | j as u64
}

/// Seed of attack campaign `c` (1-based); run seeds within it are offsets of this.
pub fn campaign_seed(seed: u64, c: usize) -> u64 {
    base_seed(seed) ^ (c as u64) << 40
}

fn summarize_group(
    config: &ExperimentConfig,
    workload: &str,
    condition: &str,
    attack: Option<&AttackSpec>,
    rows: &[&RunRow],
) -> SummaryRow {
    let col = |f: fn(&RunRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
    let aex = col(|r| r.aex as f64);
    let misses = col(|r| r.l3_misses as f64);
    let time = col(|r| r.time_ms);
    let delta = col(|r| r.aex_delta as f64);
    let mut accuracies: Vec<(usize, f64)> =
        rows.iter().filter_map(|r| r.campaign_accuracy.map(|a| (r.campaign, a))).collect();
    accuracies.dedup_by_key(|(c, _)| *c);
    let acc: Vec<f64> = accuracies.iter().map(|(_, a)| *a).collect();
    SummaryRow {
        victim: config.preset.clone(),
        instrumentation: config.instrumentation.to_string(),
        workload: workload.to_string(),
        condition: condition.to_string(),
        window: attack.map(|a| a.window),
        samples: attack.map(|a| a.samples),
        campaigns: acc.len(),
        runs: rows.len(),
        accuracy_mean: (!acc.is_empty()).then(|| mean(&acc)),
        accuracy_sd: (!acc.is_empty()).then(|| std_dev(&acc)),
        aex_mean: mean(&aex),
        aex_sd: std_dev(&aex),
        misses_mean: mean(&misses),
        misses_sd: std_dev(&misses),
        time_ms_mean: mean(&time),
        time_ms_sd: std_dev(&time),
        aex_delta_mean: mean(&delta),
        aex_delta_max: rows.iter().map(|r| r.aex_delta).max().unwrap_or(0),
    }
}

/// Summary rows recomputed from per-run rows: one per benign workload in
/// config order, then one for the attack.
pub fn summarize(config: &ExperimentConfig, runs: &[RunRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for w in &config.benign_workloads {
        let rows: Vec<&RunRow> = runs.iter().filter(|r| r.condition == NO_ATTACK && r.workload == w.key()).collect();
        out.push(summarize_group(config, w.key(), NO_ATTACK, None, &rows));
    }
    if let Some(attack) = &config.attack {
        let key = attack.strategy.key();
        let rows: Vec<&RunRow> = runs.iter().filter(|r| r.condition == key).collect();
        out.push(summarize_group(config, config.workload.key(), key, Some(attack), &rows));
    }
    out
}

fn benign_runs(
    config: &ExperimentConfig,
    victim: &VictimModel,
    workload: Workload,
) -> Result<Vec<RunRow>, Error> {
    let preset = config.library()?;
    let mut env = preset.get(&config.preset)?.environment(config.instrumentation, workload, base_seed(config.seed))?;
    env.tsgx_alarm = config.tsgx_alarm;
    let secret = benign_secret(victim, base_seed(config.seed) ^ BENIGN_RUNS);
    (0..config.benign_runs)
        .into_par_iter()
        .map(|j| {
            let run_env = env.for_run(benign_run_index(workload, j));
            let out = execute_run(victim, &secret, &run_env, &mut NoAdversary)?;
            Ok(RunRow {
                condition: NO_ATTACK.to_string(),
                workload: workload.key().to_string(),
                campaign: 0,
                target: 0,
                seed: run_env.seed,
                aex: out.metrics.aex_count,
                l3_misses: out.metrics.l3_misses,
                time_ms: out.metrics.wall_time,
                aex_delta: out.aex_delta(),
                alarm: out.alarm,
                segments_completed: out.segments_completed,
                campaign_accuracy: None,
            })
        })
        .collect()
}

fn campaign(
    config: &ExperimentConfig,
    victim: &VictimModel,
    attack: &AttackSpec,
    c: usize,
) -> Result<(CampaignRecord, Vec<RunRow>), Error> {
    let library = config.library()?;
    let seed = campaign_seed(config.seed, c);
    let mut env = library.get(&config.preset)?.environment(config.instrumentation, config.workload, seed)?;
    env.tsgx_alarm = config.tsgx_alarm;
    let secret = match &config.secret {
        Some(hex) => BitString::from_hex(hex, victim.n_segments)?.bits().to_vec(),
        None => random_secret(victim, seed),
    };
    let report = recover_secret(victim, &env, &secret, &attack.config())?;
    let rows = report
        .runs
        .iter()
        .map(|r| RunRow {
            condition: attack.strategy.key().to_string(),
            workload: config.workload.key().to_string(),
            campaign: c,
            target: r.target,
            seed: r.run,
            aex: r.metrics.aex_count,
            l3_misses: r.metrics.l3_misses,
            time_ms: r.metrics.wall_time,
            aex_delta: r.aex_delta,
            alarm: r.alarm,
            segments_completed: r.segments_completed,
            campaign_accuracy: Some(report.accuracy),
        })
        .collect();
    let record = CampaignRecord {
        campaign: c,
        seed,
        truth: render(victim, &report.truth),
        recovered: render(victim, &report.recovered),
        accuracy: report.accuracy,
        undecided: report.undecided(),
        alarm: report.alarm,
        runs: report.total_runs(),
    };
    Ok((record, rows))
}

/// Simulate every run of `config` in memory.
pub fn simulate(config: &ExperimentConfig) -> Result<ExperimentResult, Error> {
    let library = config.library()?;
    config.validate(&library)?;
    let preset = library.get(&config.preset)?;
    let mut victim = preset.victim(config.instrumentation)?;
    if let Some(n) = config.n_segments {
        victim = victim.with_segments(n);
    }

    let mut runs = Vec::new();
    for &w in &config.benign_workloads {
        runs.extend(benign_runs(config, &victim, w)?);
    }

    let mut recovery = None;
    if let Some(attack) = &config.attack {
        let campaigns: Vec<(CampaignRecord, Vec<RunRow>)> = (1..=config.repetitions)
            .into_par_iter()
            .map(|c| campaign(config, &victim, attack, c))
            .collect::<Result<_, Error>>()?;
        let acc: Vec<f64> = campaigns.iter().map(|(r, _)| r.accuracy).collect();
        let mut records = Vec::with_capacity(campaigns.len());
        for (record, rows) in campaigns {
            records.push(record);
            runs.extend(rows);
        }
        recovery = Some(RecoverySummary {
            victim: config.preset.clone(),
            instrumentation: config.instrumentation.to_string(),
            workload: config.workload.key().to_string(),
            strategy: attack.strategy.key().to_string(),
            window: attack.window,
            samples: attack.samples,
            accuracy_mean: mean(&acc),
            accuracy_sd: std_dev(&acc),
            campaigns: records,
        });
    }

    let mut detection = Vec::new();
    if let Some(attack) = &config.attack {
        let attack_metrics: Vec<RunMetrics> =
            runs.iter().filter(|r| r.condition == attack.strategy.key()).map(RunRow::metrics).collect();
        for sweep in &config.detectors {
            let grid = sweep.grid()?;
            for &w in &config.benign_workloads {
                let benign: Vec<RunMetrics> = runs
                    .iter()
                    .filter(|r| r.condition == NO_ATTACK && r.workload == w.key())
                    .map(RunRow::metrics)
                    .collect();
                let report = evaluate_detector(sweep.family, &grid, &attack_metrics, &benign)?;
                detection.push(DetectionSet { workload: w, report });
            }
        }
    }

    Ok(ExperimentResult { summary: summarize(config, &runs), config: config.clone(), runs, detection, recovery })
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

impl ExperimentResult {
    pub fn detection_rows(&self, family: DetectorFamily) -> Vec<DetectionCsvRow> {
        self.detection
            .iter()
            .filter(|d| d.report.family == family)
            .flat_map(|d| {
                d.report.rows.iter().map(move |r| DetectionCsvRow {
                    victim: self.config.preset.clone(),
                    workload: d.workload.key().to_string(),
                    family,
                    threshold: r.threshold,
                    recall: r.recall,
                    specificity: r.specificity,
                    n_attack: d.report.n_attack,
                    n_benign: d.report.n_benign,
                })
            })
            .collect()
    }

    /// Write `runs.csv`, `summary.csv`, one `detection_<family>.csv` per
    /// swept family and, with an attack, `recovery.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, Error> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let path = dir.join("runs.csv");
        write_csv(&path, &self.runs)?;
        written.push(path);
        let path = dir.join("summary.csv");
        write_csv(&path, &self.summary)?;
        written.push(path);
        for sweep in &self.config.detectors {
            let path = dir.join(format!("detection_{}.csv", sweep.family));
            write_csv(&path, self.detection_rows(sweep.family))?;
            written.push(path);
        }
        if let Some(recovery) = &self.recovery {
            let path = dir.join("recovery.json");
            let mut f = fs::File::create(&path)?;
            serde_json::to_writer_pretty(&mut f, recovery)?;
            writeln!(f)?;
            written.push(path);
        }
        Ok(written)
    }

    /// One CSV per (family, victim, benign workload) with the full threshold grid.
    pub fn write_sweeps(&self, dir: &Path) -> Result<Vec<PathBuf>, Error> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for d in &self.detection {
            let path = dir.join(format!("sweep_{}_{}_{}.csv", d.report.family, self.config.preset, d.workload));
            d.report.write_csv(fs::File::create(&path)?)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn out_dir(config: &ExperimentConfig) -> PathBuf {
    config.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

/// Simulate `config` and write its report files to its output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, Error> {
    let result = simulate(config)?;
    result.write(&out_dir(config))?;
    Ok(result)
}

/// Simulate `config` and write only its per-workload detector sweeps.
pub fn sweep_thresholds(config: &ExperimentConfig) -> Result<Vec<PathBuf>, Error> {
    if config.detectors.is_empty() {
        return Err(Error::Config("no detector families to sweep".into()));
    }
    simulate(config)?.write_sweeps(&out_dir(config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacker::Strategy;
    use crate::harness::config::DetectorSweep;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            benign_workloads: vec![Workload::Idle, Workload::GccLike],
            benign_runs: 40,
            repetitions: 2,
            seed: 11,
            n_segments: Some(16),
            attack: Some(AttackSpec::new(Strategy::PageFault, 1, 3)),
            detectors: vec![DetectorSweep::range(DetectorFamily::IdealAex, 1.0, 6.0, 1.0)],
            ..ExperimentConfig::new("powm")
        }
    }

    #[test]
    fn run_indices_are_disjoint() {
        assert_ne!(benign_run_index(Workload::Idle, 0), benign_run_index(Workload::GccLike, 0));
        assert_ne!(campaign_seed(5, 1) ^ (1 << 20), base_seed(5) ^ benign_run_index(Workload::Idle, 1 << 20));
        assert_eq!(campaign_seed(5, 0), base_seed(5));
        assert_ne!(base_seed(1) ^ 7, base_seed(2) ^ 4);
    }

    #[test]
    fn experiment_shapes() {
        let r = simulate(&small()).unwrap();
        assert_eq!(r.runs.iter().filter(|x| x.condition == NO_ATTACK).count(), 80);
        assert_eq!(r.summary.len(), 3);
        assert_eq!(r.summary[2].campaigns, 2);
        assert_eq!(r.summary[2].runs, 2 * 16 * 3);
        assert_eq!(r.detection.len(), 2);
        assert_eq!(r.recovery.as_ref().unwrap().campaigns.len(), 2);
        assert!(r.summary[0].accuracy_mean.is_none());
    }

    #[test]
    fn labels_render_for_trees() {
        let c = ExperimentConfig {
            n_segments: Some(4),
            benign_workloads: vec![Workload::Idle],
            benign_runs: 5,
            attack: Some(AttackSpec::new(Strategy::PageFault, 1, 1)),
            ..ExperimentConfig::new("opencv")
        };
        let r = simulate(&c).unwrap();
        let rec = &r.recovery.unwrap().campaigns[0];
        assert_eq!(rec.truth.split(',').count(), 4);
    }

    #[test]
    fn parallel_matches_serial() {
        let c = small();
        let a = with_jobs(Some(1), || simulate(&c)).unwrap().unwrap();
        let b = with_jobs(Some(4), || simulate(&c)).unwrap().unwrap();
        assert_eq!(a.runs, b.runs);
        assert_eq!(a.summary, b.summary);
    }
}
