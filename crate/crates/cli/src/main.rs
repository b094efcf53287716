use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use spreadsim::attacker::Strategy;
use spreadsim::detector::DetectorFamily;
use spreadsim::harness::{
    reproduce, run_experiment, sweep_thresholds, with_jobs, AttackSpec, DetectorSweep, ExperimentConfig,
    TARGETS,
};
use spreadsim::victim::{profile_constants, Instrumentation, Workload};

#[derive(Parser)]
#[command(name = "spreadsim", version, about = "Simulate spread-out enclave side-channel attacks and their detectors")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Victim preset: powm, ec or opencv.
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Print a preset's constants, optionally with profiled estimates.
    Calibrate {
        #[arg(long, default_value = "ideal")]
        instrumentation: Instrumentation,
        /// Profile the victim with this many runs and print the estimates.
        #[arg(long)]
        profile: Option<usize>,
    },
    /// Run one recovery campaign.
    Attack {
        #[arg(long, default_value = "page-fault")]
        strategy: Strategy,
        #[arg(long, default_value_t = 1)]
        window: usize,
        #[arg(long, default_value_t = 9)]
        samples: usize,
        /// Secret in hex; random when absent.
        #[arg(long)]
        secret: Option<String>,
        #[arg(long)]
        instrumentation: Option<Instrumentation>,
        /// Segments per run.
        #[arg(long)]
        segments: Option<usize>,
    },
    /// Benign runs under one or more workloads.
    Baseline {
        #[arg(long, value_delimiter = ',', default_value = "idle")]
        workloads: Vec<Workload>,
        #[arg(long, default_value_t = 1000)]
        runs: usize,
        #[arg(long)]
        instrumentation: Option<Instrumentation>,
    },
    /// Detector threshold sweeps of attack runs against benign runs.
    Sweep {
        #[arg(long, default_value = "page-fault")]
        strategy: Strategy,
        #[arg(long, value_delimiter = ',', default_value = "idle,gcc,redis")]
        workloads: Vec<Workload>,
        #[arg(long, value_delimiter = ',', default_value = "ideal_aex")]
        families: Vec<DetectorFamily>,
        /// Threshold range as from,to,step.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [1.0, 40.0, 1.0])]
        range: Vec<f64>,
    },
    /// Rerun a canned table or figure grid.
    Reproduce {
        /// One of table2, table3, table5, fig9, fig10, fig11.
        target: String,
    },
}

impl Common {
    /// The config file, or defaults for the chosen preset, with flags applied.
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::new(self.preset.as_deref().unwrap_or("powm")),
        };
        if let Some(p) = &self.preset {
            c.preset = p.clone();
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out = Some(o.clone());
        }
        Ok(c)
    }
}

fn report(result: &spreadsim::harness::ExperimentResult, out: &std::path::Path) {
    for row in &result.summary {
        let acc = row.accuracy_mean.map(|a| format!(" accuracy {:.2}%", 100.0 * a)).unwrap_or_default();
        println!(
            "{} {} {} {}: {} runs, AEX {:.2} ± {:.2}, misses {:.1} ± {:.1}, time {:.3} ± {:.3} ms{acc}",
            row.victim,
            row.instrumentation,
            row.workload,
            row.condition,
            row.runs,
            row.aex_mean,
            row.aex_sd,
            row.misses_mean,
            row.misses_sd,
            row.time_ms_mean,
            row.time_ms_sd,
        );
    }
    println!("wrote {}", out.display());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let common = &cli.common;
    match &cli.verb {
        Verb::Calibrate { instrumentation, profile } => {
            let config = common.config()?;
            let library = config.library()?;
            let preset = library.get(&config.preset)?;
            let victim = preset.victim(*instrumentation)?;
            println!("preset {} ({}), {}", preset.name, preset.kind, instrumentation);
            println!("{}", toml::to_string(&victim.timing)?);
            println!("n_segments = {}", victim.n_segments);
            println!("aex_cost = {}", victim.aex_cost.0);
            println!("probe_noise = {}", preset.probe_noise);
            for (instr, workload, row) in &preset.baselines {
                if instr == instrumentation {
                    println!(
                        "baseline {workload}: AEX {} ± {}, misses {} ± {}, time {} ± {} ms",
                        row.aex.mean, row.aex.sd, row.misses.mean, row.misses.sd, row.time_ms.mean, row.time_ms.sd
                    );
                }
            }
            if let Some(reps) = profile {
                let env = preset.environment(*instrumentation, Workload::Isolated, config.seed)?;
                let est = with_jobs(common.jobs, || profile_constants(&victim, &env, *reps))??;
                println!("profiled over {reps} runs:\n{}", toml::to_string(&est.timing)?);
            }
        }
        Verb::Attack { strategy, window, samples, secret, instrumentation, segments } => {
            let mut config = common.config()?;
            config.attack = Some(AttackSpec::new(*strategy, *window, *samples));
            config.secret = secret.clone().or(config.secret);
            config.n_segments = segments.or(config.n_segments);
            if let Some(i) = instrumentation {
                config.instrumentation = *i;
            }
            if common.config.is_none() {
                config.repetitions = 1;
            }
            let result = with_jobs(common.jobs, || run_experiment(&config))??;
            if let Some(rec) = &result.recovery {
                for c in &rec.campaigns {
                    println!("campaign {}: accuracy {:.2}%, {} undecided, {} runs", c.campaign, 100.0 * c.accuracy, c.undecided, c.runs);
                    println!("  truth     {}", c.truth);
                    println!("  recovered {}", c.recovered);
                }
            }
            report(&result, &out_of(&config));
        }
        Verb::Baseline { workloads, runs, instrumentation } => {
            let mut config = common.config()?;
            config.attack = None;
            config.detectors.clear();
            config.benign_workloads = workloads.clone();
            config.benign_runs = *runs;
            if let Some(i) = instrumentation {
                config.instrumentation = *i;
            }
            let result = with_jobs(common.jobs, || run_experiment(&config))??;
            report(&result, &out_of(&config));
        }
        Verb::Sweep { strategy, workloads, families, range } => {
            let mut config = common.config()?;
            if common.config.is_none() {
                config.attack = Some(AttackSpec::new(*strategy, if *strategy == Strategy::CacheOnly { 9 } else { 1 }, 9));
                config.benign_workloads = workloads.clone();
                config.detectors =
                    families.iter().map(|&f| DetectorSweep::range(f, range[0], range[1], range[2])).collect();
            }
            let files = with_jobs(common.jobs, || sweep_thresholds(&config))??;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Verb::Reproduce { target } => {
            if !TARGETS.contains(&target.as_str()) {
                bail!("unknown target {target:?}; expected one of {}", TARGETS.join(", "));
            }
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("out").join(target));
            let files = with_jobs(common.jobs, || reproduce(target, common.seed.unwrap_or(0), &out))??;
            println!("wrote {} files under {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn out_of(config: &ExperimentConfig) -> PathBuf {
    config.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}
