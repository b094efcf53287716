use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{execute_run, BaselineRow, EnvironmentProfile, NoAdversary, VictimModel};
use crate::stats::{mean, std_dev};
use crate::timing::{SegmentTimingModel, Tick};
use crate::Error;

/// Timing constants as measured by the attacker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileEstimate {
    pub c0_mean: f64,
    pub c0_sd: f64,
    pub c1_mean: f64,
    pub c1_sd: f64,
    pub c_miss: f64,
    /// The estimate as a timing model, carrying over the victim's margins.
    pub timing: SegmentTimingModel,
}

/// Estimate segment durations from short profiling runs timed with the
/// attacker's logical clock.
///
/// Each measured run executes a 1-segment followed by the segment of
/// interest, so the measured segment runs warm. A separate batch of single
/// cold 1-segments yields the first-use penalty.
pub fn profile_constants(victim: &VictimModel, env: &EnvironmentProfile, reps: usize) -> Result<ProfileEstimate, Error> {
    if reps < 2 {
        return Err(Error::Victim("profiling needs at least two repetitions".into()));
    }
    // Runs this short see essentially no background exits.
    let quiet = EnvironmentProfile { baseline: BaselineRow::ZERO, tsgx_alarm: None, ..env.clone() };
    let mut clock_rng = ChaCha8Rng::seed_from_u64(env.seed);
    clock_rng.set_stream(5);
    let jitter = (env.measurement_jitter > 0.0).then(|| Normal::new(0.0, env.measurement_jitter).expect("finite"));
    let mut stamp = |t: Tick| t.as_f64() + jitter.as_ref().map(|d| d.sample(&mut clock_rng)).unwrap_or(0.0);

    let warm = victim.with_segments(2);
    let lead = if victim.is_bit_serial() { 1 } else { 0 };
    let mut measure = |bit: u8, batch: u64| -> Result<Vec<f64>, Error> {
        (0..reps)
            .map(|k| {
                let run_env = quiet.for_run(batch * reps as u64 + k as u64);
                let out = execute_run(&warm, &[lead, bit], &run_env, &mut NoAdversary)?;
                let start = out.trace.boundaries().nth(1).map(|(_, t)| t).unwrap_or_default();
                Ok(stamp(out.end_tick) - stamp(start))
            })
            .collect()
    };
    let zeros = measure(0, 0)?;
    let ones = if victim.is_bit_serial() { measure(1, 1)? } else { zeros.clone() };

    let c_miss = if victim.is_bit_serial() {
        let cold = victim.with_segments(1);
        let mut firsts = Vec::with_capacity(reps);
        for k in 0..reps {
            let run_env = quiet.for_run(2 * reps as u64 + k as u64);
            let out = execute_run(&cold, &[1], &run_env, &mut NoAdversary)?;
            firsts.push(stamp(out.end_tick) - stamp(Tick::ZERO));
        }
        (mean(&firsts) - mean(&ones)).max(0.0)
    } else {
        0.0
    };

    let (c0_mean, c1_mean) = (mean(&zeros), mean(&ones));
    let timing = SegmentTimingModel {
        c_base: Tick(c0_mean.round().max(1.0) as u64),
        c_branch: Tick((c1_mean - c0_mean).round().max(0.0) as u64),
        c_miss: Tick(c_miss.round() as u64),
        sigma0: std_dev(&zeros),
        sigma1: std_dev(&ones),
        ..victim.timing
    };
    Ok(ProfileEstimate { c0_mean, c0_sd: timing.sigma0, c1_mean, c1_sd: timing.sigma1, c_miss, timing })
}
