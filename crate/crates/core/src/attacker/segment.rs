//! Attacks on bit-serial victims.

use rayon::prelude::*;

use super::probes::{ProbeOnly, StopAndMeasure, StopAndProbe, TrapEverything};
use super::{
    confidence, merge_windows, run_index, vote_guesses, AttackConfig, BitSample, RecoveryReport, RunRecord,
    Strategy, WindowGuess,
};
use crate::channels::{classify_probe_trace, ClassifyMode, Guess, PeakDecoder, ProbeParams};
use crate::timing::{SegmentTimingModel, Tick};
use crate::victim::{execute_run, EnvironmentProfile, PageId, VictimModel};
use crate::Error;

/// How long before the expected window start a cache-only probe begins: half
/// a 0-segment, so the window tolerates drift either way until a neighbouring
/// entry access would be taken for the first one.
pub fn cache_only_lead(model: &SegmentTimingModel) -> Tick {
    Tick(model.c0().0 / 2)
}

fn probe_params(env: &EnvironmentProfile) -> ProbeParams {
    ProbeParams { noise: env.probe_noise, ..ProbeParams::default() }
}

/// Expected length of a 1-segment given the prefix before it.
fn one_duration(model: &SegmentTimingModel, prefix: &[u8]) -> Tick {
    if prefix.contains(&1) {
        model.c1()
    } else {
        model.c1() + model.c_miss
    }
}

fn classify_gap(gap: Tick, model: &SegmentTimingModel, prefix: &[u8]) -> Guess {
    let d0 = gap.0.abs_diff(model.c0().0);
    let d1 = gap.0.abs_diff(one_duration(model, prefix).0);
    if d0 <= d1 {
        Guess::Bit0
    } else {
        Guess::Bit1
    }
}

/// Stop the victim at segment `i` with one trap, time it with a second.
pub fn attack_segment_page_fault(
    victim: &VictimModel,
    env: &EnvironmentProfile,
    secret: &[u8],
    i: usize,
    model: &SegmentTimingModel,
    prefix: &[u8],
) -> Result<BitSample, Error> {
    let t_i = model.cumulative_start_time(prefix);
    let mut adv =
        StopAndMeasure::new(victim.entry_page(), t_i.saturating_sub(model.stop_margin), model.callee_runtime);
    let out = execute_run(victim, secret, env, &mut adv)?;
    let guess = match adv.faults.as_slice() {
        [] => Guess::Unclassifiable,
        [stop, rest @ ..] => {
            // Without a second fault the enclave's return ends the segment.
            let until = rest.first().map(|f| f.tick).unwrap_or(out.end_tick);
            let gap = (until - stop.resume).saturating_sub(adv.exits.stalled_between(stop.resume, until));
            classify_gap(gap, model, prefix)
        }
    };
    Ok(BitSample { segment: i, guess, run: RunRecord::from_output(env.seed, i, &out) })
}

/// Stop at segment `i`, then look for the next segment's entry access in
/// the cache while a 0-segment would still be running.
pub fn attack_segment_page_cache(
    victim: &VictimModel,
    env: &EnvironmentProfile,
    secret: &[u8],
    i: usize,
    model: &SegmentTimingModel,
    prefix: &[u8],
) -> Result<BitSample, Error> {
    let t_i = model.cumulative_start_time(prefix);
    let r = model.callee_runtime;
    let mut adv = StopAndProbe::new(
        victim.entry_page(),
        t_i.saturating_sub(model.stop_margin),
        r,
        model.c0().saturating_sub(r),
    );
    let out = execute_run(victim, secret, env, &mut adv)?;
    let guess = match (adv.fault, out.probes.first()) {
        (Some(_), Some(trace)) if !trace.samples.is_empty() => {
            let g = classify_probe_trace(trace, model, ClassifyMode::WindowAbsence, &probe_params(env));
            if g == Guess::Bit1 && out.end_tick <= trace.end() {
                Guess::Bit0
            } else {
                g
            }
        }
        _ => Guess::Unclassifiable,
    };
    Ok(BitSample { segment: i, guess, run: RunRecord::from_output(env.seed, i, &out) })
}

/// Probe the entry page across segments `i-w+1..=i` without any trap.
/// `prefix` holds the bits before the window.
pub fn attack_window_cache_only(
    victim: &VictimModel,
    env: &EnvironmentProfile,
    secret: &[u8],
    i: usize,
    w: usize,
    model: &SegmentTimingModel,
    prefix: &[u8],
) -> Result<(WindowGuess, RunRecord), Error> {
    if w == 0 || i < w || prefix.len() != i - w {
        return Err(Error::Attack(format!("window {w} ending at segment {i} needs a prefix of {} bits", i.saturating_sub(w))));
    }
    let lead = cache_only_lead(model);
    let start = model.cumulative_start_time(prefix).saturating_sub(lead);
    let duration = Tick(lead.0 + w as u64 * model.c1().0 + model.c_miss.0);
    let mut adv = ProbeOnly { page: victim.entry_page(), start, duration, exits: Default::default() };
    let out = execute_run(victim, secret, env, &mut adv)?;
    let params = probe_params(env);
    let guesses = match out.probes.first() {
        Some(trace) if !trace.samples.is_empty() => {
            PeakDecoder { trace, timing: model, params: &params, exits: &adv.exits.0, end: Some(out.end_tick) }
                .decode(w)
        }
        _ => vec![Guess::Unclassifiable; w],
    };
    Ok((WindowGuess { first: i + 1 - w, guesses }, RunRecord::from_output(env.seed, i, &out)))
}

fn seeded(env: &EnvironmentProfile, target: usize, attempt: usize) -> EnvironmentProfile {
    env.for_run(run_index(target, attempt))
}

pub(super) fn recover_per_segment(
    victim: &VictimModel,
    env: &EnvironmentProfile,
    secret: &[u8],
    config: &AttackConfig,
    model: &SegmentTimingModel,
) -> Result<RecoveryReport, Error> {
    let n = secret.len();
    let mut prefix: Vec<u8> = Vec::with_capacity(n);
    let mut decisions = Vec::with_capacity(n);
    let mut runs = Vec::with_capacity(n * config.samples);
    for i in 1..=n {
        let samples: Vec<BitSample> = (0..config.samples)
            .into_par_iter()
            .map(|j| {
                let run_env = seeded(env, i, j);
                match config.strategy {
                    Strategy::PageFault => attack_segment_page_fault(victim, &run_env, secret, i, model, &prefix),
                    _ => attack_segment_page_cache(victim, &run_env, secret, i, model, &prefix),
                }
            })
            .collect::<Result<_, Error>>()?;
        let guesses: Vec<Guess> = samples.iter().map(|s| s.guess).collect();
        let decision = vote_guesses(guesses.iter().copied()).bit();
        decisions.push((decision, confidence(&guesses, decision)));
        prefix.push(decision.unwrap_or(0));
        runs.extend(samples.into_iter().map(|s| s.run));
    }
    Ok(RecoveryReport::finish(config, secret, decisions, runs, false))
}

/// Position-wise vote over windows of one target; ties stay unclassifiable.
fn consensus<'a>(w: usize, windows: impl Iterator<Item = &'a WindowGuess> + Clone) -> WindowGuess {
    let first = windows.clone().next().map(|g| g.first).unwrap_or(1);
    let guesses = (0..w)
        .map(|pos| match vote_guesses(windows.clone().map(|g| g.guesses[pos])).bit() {
            Some(b) => Guess::from_bit(b),
            None => Guess::Unclassifiable,
        })
        .collect();
    WindowGuess { first, guesses }
}

pub(super) fn recover_windowed(
    victim: &VictimModel,
    env: &EnvironmentProfile,
    secret: &[u8],
    config: &AttackConfig,
    model: &SegmentTimingModel,
) -> Result<RecoveryReport, Error> {
    let n = secret.len();
    let w = config.window.min(n);
    let k = config.samples;
    let mut runs = Vec::new();
    let mut decisions: Vec<(Option<u8>, f64)> = Vec::with_capacity(n);

    let window_run = |i: usize, j: usize, prefix: &[u8]| -> Result<(WindowGuess, RunRecord), Error> {
        attack_window_cache_only(victim, &seeded(env, i, j), secret, i, w, model, &prefix[..i - w])
    };

    // First window: every position is voted on directly.
    let first: Vec<(WindowGuess, RunRecord)> =
        (0..k).into_par_iter().map(|j| window_run(w, j, &[])).collect::<Result<_, Error>>()?;
    let mut prev = consensus(w, first.iter().map(|(g, _)| g));
    for pos in 0..w {
        let guesses: Vec<Guess> = first.iter().map(|(g, _)| g.guesses[pos]).collect();
        let d = vote_guesses(guesses.iter().copied()).bit();
        decisions.push((d, confidence(&guesses, d)));
    }
    runs.extend(first.into_iter().map(|(_, r)| r));
    let mut prefix: Vec<u8> = decisions.iter().map(|(d, _)| d.unwrap_or(0)).collect();

    // Later targets: a window's last bit counts only if the window agrees
    // with the consensus of the previous target's windows. Retry rejected
    // windows, up to 2k runs.
    for i in w + 1..=n {
        let mut accepted = Vec::with_capacity(k);
        let mut seen = Vec::with_capacity(2 * k);
        let mut attempt = 0;
        while accepted.len() < k && attempt < 2 * k {
            let batch = (k - accepted.len()).min(2 * k - attempt);
            let results: Vec<(WindowGuess, RunRecord)> = (attempt..attempt + batch)
                .into_par_iter()
                .map(|j| window_run(i, j, &prefix))
                .collect::<Result<_, Error>>()?;
            attempt += batch;
            for (g, rec) in results {
                runs.push(rec);
                if let Some(bit) = merge_windows(&prev, &g) {
                    accepted.push(Guess::from_bit(bit));
                }
                seen.push(g);
            }
        }
        prev = consensus(w, seen.iter());
        prev.first = i + 1 - w;
        let d = vote_guesses(accepted.iter().copied()).bit();
        decisions.push((d, confidence(&accepted, d)));
        prefix.push(d.unwrap_or(0));
    }
    Ok(RecoveryReport::finish(config, secret, decisions, runs, false))
}

/// Split a whole-run fault sequence into segments by longest script match.
fn parse_faults(victim: &VictimModel, pages: &[PageId], n: usize) -> Vec<Option<u8>> {
    let scripts = &victim.layout.scripts;
    let mut out = Vec::with_capacity(n);
    let mut pos = 0;
    while out.len() < n && pos < pages.len() {
        let best = scripts
            .iter()
            .enumerate()
            .filter(|(_, s)| pages[pos..].starts_with(s))
            .max_by_key(|(sym, s)| (s.len(), std::cmp::Reverse(*sym)));
        match best {
            Some((sym, s)) => {
                out.push(Some(sym as u8));
                pos += s.len();
            }
            None => {
                out.push(None);
                pos += 1;
                while pos < pages.len() && pages[pos] != victim.entry_page() {
                    pos += 1;
                }
            }
        }
    }
    out.resize(n, None);
    out
}

/// Attack the whole run, `k` times, and vote per segment.
pub fn standard_attack(
    victim: &VictimModel,
    env: &EnvironmentProfile,
    secret: &[u8],
    kind: Strategy,
    k: usize,
    model: &SegmentTimingModel,
) -> Result<RecoveryReport, Error> {
    let n = secret.len();
    let config = AttackConfig::new(kind, k);
    config.validate()?;
    let params = probe_params(env);
    let results: Vec<(Vec<Option<u8>>, RunRecord)> = (0..k)
        .into_par_iter()
        .map(|j| {
            let run_env = seeded(env, 0, j);
            let (symbols, out) = match kind {
                Strategy::StandardPage => {
                    let mut adv = TrapEverything { pages: victim.layout.pages().collect(), faults: Vec::new() };
                    let out = execute_run(victim, secret, &run_env, &mut adv)?;
                    let pages: Vec<PageId> = adv.faults.iter().map(|f| f.page).collect();
                    (parse_faults(victim, &pages, n), out)
                }
                Strategy::StandardCache => {
                    let span = model.total_duration(&vec![1; n + 2]) + model.c_miss;
                    let mut adv = ProbeOnly { page: victim.entry_page(), start: Tick::ZERO, duration: span, exits: Default::default() };
                    let out = execute_run(victim, secret, &run_env, &mut adv)?;
                    let guesses = match out.probes.first() {
                        Some(trace) => PeakDecoder {
                            trace,
                            timing: model,
                            params: &params,
                            exits: &adv.exits.0,
                            end: Some(out.end_tick),
                        }
                        .decode(n),
                        None => vec![Guess::Unclassifiable; n],
                    };
                    (guesses.into_iter().map(Guess::bit).collect(), out)
                }
                other => return Err(Error::Attack(format!("{other} is not a whole-run attack"))),
            };
            Ok((symbols, RunRecord::from_output(run_env.seed, 0, &out)))
        })
        .collect::<Result<_, Error>>()?;

    let alarm = results.iter().any(|(_, r)| r.alarm);
    let decisions = (0..n)
        .map(|pos| {
            let votes: Vec<Option<u8>> = results.iter().map(|(s, _)| s[pos]).collect();
            let d = super::vote_labels(votes.iter().copied());
            let support = votes.iter().flatten().count();
            let conf = match d {
                Some(v) if support > 0 => votes.iter().filter(|x| **x == Some(v)).count() as f64 / support as f64,
                _ => 0.0,
            };
            (d, conf)
        })
        .collect();
    let runs = results.into_iter().map(|(_, r)| r).collect();
    Ok(RecoveryReport::finish(&config, secret, decisions, runs, alarm))
}
