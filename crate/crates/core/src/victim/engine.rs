//! The run engine: walks a victim through its segments, interleaving page
//! accesses with background exits and the adversary's traps.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EnvironmentProfile, PageId, VictimModel};
use crate::channels::{prime_probe, FaultRecord, ProbeParams, ProbeTrace, ProbeWindow, RunContext};
use crate::stats::{MeanSd, TruncatedNormal};
use crate::timing::{RunMetrics, Tick};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AexCause {
    PageFault,
    Timer,
    /// A background exit that aborted an instrumented transaction.
    TsxAbort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    PageAccess(PageId),
    Aex(AexCause),
    SegmentBoundary(u32),
    ProbeObservable(PageId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub tick: Tick,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTrace {
    pub events: Vec<Event>,
}

impl EventTrace {
    pub fn aex_count(&self) -> usize {
        self.events.iter().filter(|e| matches!(e.kind, EventKind::Aex(_))).count()
    }

    pub fn page_faults(&self) -> usize {
        self.events.iter().filter(|e| e.kind == EventKind::Aex(AexCause::PageFault)).count()
    }

    pub fn accesses(&self, page: PageId) -> impl Iterator<Item = Tick> + '_ {
        self.events.iter().filter_map(move |e| (e.kind == EventKind::PageAccess(page)).then_some(e.tick))
    }

    pub fn boundaries(&self) -> impl Iterator<Item = (u32, Tick)> + '_ {
        self.events.iter().filter_map(|e| match e.kind {
            EventKind::SegmentBoundary(i) => Some((i, e.tick)),
            _ => None,
        })
    }
}

/// Attacker hooks called by the engine. The adversary only sees what a
/// privileged attacker would: its own timers, faults and exits.
pub trait Adversary {
    fn on_start(&mut self, _ctx: &mut RunContext) -> Result<(), Error> {
        Ok(())
    }

    fn on_fault(&mut self, _ctx: &mut RunContext, _fault: FaultRecord) {}

    /// A background exit at `tick` cost the victim `cost` ticks.
    fn on_aex(&mut self, _ctx: &mut RunContext, _tick: Tick, _cost: Tick) {}
}

/// No traps, no probes.
pub struct NoAdversary;

impl Adversary for NoAdversary {}

/// Traps and probe windows fixed before the run starts.
#[derive(Debug, Clone, Default)]
pub struct StaticPlan {
    pub traps: Vec<(PageId, Tick, Option<Tick>)>,
    pub probes: Vec<ProbeWindow>,
}

impl Adversary for StaticPlan {
    fn on_start(&mut self, ctx: &mut RunContext) -> Result<(), Error> {
        for &(page, at, rearm) in &self.traps {
            ctx.schedule_page_trap(page, at, rearm)?;
        }
        for w in &self.probes {
            ctx.prime_probe(w.page, w.start, w.duration);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub trace: EventTrace,
    pub metrics: RunMetrics,
    /// The background draw of this run (exits, misses, extra milliseconds).
    pub background: RunMetrics,
    pub faults: Vec<FaultRecord>,
    pub probes: Vec<ProbeTrace>,
    /// The instrumentation's online counter reached its threshold.
    pub alarm: bool,
    pub segments_completed: usize,
    pub end_tick: Tick,
}

impl RunOutput {
    /// Exits caused by the attack.
    pub fn aex_delta(&self) -> u64 {
        self.metrics.aex_count.saturating_sub(self.background.aex_count)
    }
}

mod stream {
    pub const VICTIM: u64 = 0;
    pub const BACKGROUND: u64 = 1;
    pub const TIMER: u64 = 2;
    pub const PROBE: u64 = 3;
    pub const RESTART: u64 = 4;
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy)]
enum Step {
    Background,
    Access(PageId),
}

struct Background {
    /// (segment, fraction of that segment) sorted.
    exits: Vec<(usize, f64)>,
    misses: u64,
    offset_ms: f64,
}

fn draw_background(victim: &VictimModel, env: &EnvironmentProfile, rng: &mut ChaCha8Rng) -> Background {
    let count = env.baseline.draw_aex(rng);
    let misses = env.baseline.draw_misses(rng);
    let n = victim.n_segments;
    let mut exits: Vec<(usize, f64)> = (0..count)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * n as f64;
            ((u.floor() as usize).min(n - 1), u.fract())
        })
        .collect();
    exits.sort_by(|a, b| a.partial_cmp(b).expect("finite"));

    // Whatever the victim's own work and the expected exits do not explain
    // of the benign wall time is attributed to the host.
    let row = env.baseline.time_ms;
    let offset_ms = if row.mean > 0.0 || row.sd > 0.0 {
        let nominal = victim.nominal_duration().as_f64();
        let mut per_exit = victim.aex_cost.as_f64();
        if env.is_tsgx() {
            per_exit += env.restart_delay.0 * nominal / n as f64;
        }
        let expected_ticks = nominal + env.baseline.aex.mean * per_exit;
        let expected_ms = expected_ticks / env.tick_rate * 1e3;
        TruncatedNormal::fit(MeanSd::new((row.mean - expected_ms).max(0.0), row.sd)).sample(rng)
    } else {
        0.0
    };
    Background { exits, misses, offset_ms }
}

fn restart_delay(env: &EnvironmentProfile, duration: Tick, rng: &mut ChaCha8Rng) -> Tick {
    let (mean, sd) = env.restart_delay;
    let d = duration.as_f64();
    let draw = if sd > 0.0 {
        Normal::new(mean * d, sd * d).expect("finite").sample(rng)
    } else {
        mean * d
    };
    Tick(draw.max(0.0).round() as u64)
}

/// Run the victim once over `secret` against `adversary`.
pub fn execute_run<A: Adversary + ?Sized>(
    victim: &VictimModel,
    secret: &[u8],
    env: &EnvironmentProfile,
    adversary: &mut A,
) -> Result<RunOutput, Error> {
    victim.check_secret(secret)?;
    if victim.instrumented != env.is_tsgx() {
        return Err(Error::Victim(format!(
            "victim instrumentation ({}) does not match environment ({})",
            victim.instrumented, env.instrumentation
        )));
    }
    let mut rng_victim = rng_stream(env.seed, stream::VICTIM);
    let mut rng_bg = rng_stream(env.seed, stream::BACKGROUND);
    let mut rng_probe = rng_stream(env.seed, stream::PROBE);
    let mut rng_restart = rng_stream(env.seed, stream::RESTART);

    let bg = draw_background(victim, env, &mut rng_bg);
    let timing = &victim.timing;
    let max_run = Tick(victim.n_segments as u64 * timing.c1().0 + timing.c_miss.0);
    let horizon = Tick(2 * max_run.0 + bg.exits.len() as u64 * victim.aex_cost.0);
    let mut ctx = RunContext::new(horizon, env.measurement_jitter, rng_stream(env.seed, stream::TIMER));
    adversary.on_start(&mut ctx)?;

    let tsgx = env.is_tsgx();
    let bg_cause = if tsgx { AexCause::TsxAbort } else { AexCause::Timer };
    let alarm_at = env.tsgx_alarm.filter(|_| tsgx);

    let mut events = Vec::new();
    let mut accesses: BTreeMap<PageId, Vec<Tick>> = BTreeMap::new();
    let mut faults = Vec::new();
    let mut aex = 0u64;
    let mut alarm = false;
    let mut now = Tick::ZERO;
    let mut seen_one = false;
    let mut next_exit = 0usize;
    let mut completed = 0usize;

    'segments: for (i, &sym) in secret.iter().enumerate() {
        events.push(Event { tick: now, kind: EventKind::SegmentBoundary(i as u32 + 1) });
        let duration = if victim.is_bit_serial() {
            let first_one = sym == 1 && !seen_one;
            seen_one |= sym == 1;
            timing.segment_duration(sym, first_one, &mut rng_victim)
        } else {
            timing.segment_duration(0, false, &mut rng_victim)
        };
        let script = victim.script(sym);

        let mut steps: Vec<(Tick, Step)> = Vec::with_capacity(script.len() + 2);
        while next_exit < bg.exits.len() && bg.exits[next_exit].0 == i {
            let frac = bg.exits[next_exit].1;
            steps.push((Tick((frac * duration.as_f64()) as u64), Step::Background));
            next_exit += 1;
        }
        for (j, &page) in script.iter().enumerate() {
            steps.push((victim.access_offset(j, script.len(), duration), Step::Access(page)));
        }
        // Background exits sort before an access at the same offset.
        steps.sort_by_key(|&(off, s)| (off, matches!(s, Step::Access(_))));

        let start = now;
        let mut shift = Tick::ZERO;
        for (off, step) in steps {
            let t = start + off + shift;
            ctx.apply_due(t);
            ctx.set_now(t);
            match step {
                Step::Background => {
                    events.push(Event { tick: t, kind: EventKind::Aex(bg_cause) });
                    aex += 1;
                    let mut delay = victim.aex_cost;
                    if tsgx {
                        delay += restart_delay(env, duration, &mut rng_restart);
                    }
                    shift += delay;
                    adversary.on_aex(&mut ctx, t, victim.aex_cost);
                }
                Step::Access(page) => {
                    let mut at = t;
                    if ctx.is_armed(page) {
                        events.push(Event { tick: t, kind: EventKind::Aex(AexCause::PageFault) });
                        aex += 1;
                        let mut delay = victim.aex_cost;
                        if tsgx {
                            delay += restart_delay(env, duration, &mut rng_restart);
                        }
                        shift += delay;
                        at = t + delay;
                        let record = FaultRecord { page, tick: t, resume: at };
                        faults.push(record);
                        ctx.fire(page, at);
                        ctx.set_now(at);
                        if alarm_at.is_some_and(|th| aex >= th) {
                            alarm = true;
                            now = t;
                            break 'segments;
                        }
                        adversary.on_fault(&mut ctx, record);
                        ctx.apply_due(at);
                    }
                    events.push(Event { tick: at, kind: EventKind::PageAccess(page) });
                    accesses.entry(page).or_default().push(at);
                }
            }
            if alarm_at.is_some_and(|th| aex >= th) {
                alarm = true;
                now = start + off + shift;
                break 'segments;
            }
        }
        now = start + duration + shift;
        completed += 1;
    }

    let params = ProbeParams { noise: env.probe_noise, ..ProbeParams::default() };
    let mut probe_periods = 0u64;
    let mut probes = Vec::new();
    for w in ctx.take_probes() {
        let trace = prime_probe(accesses.get(&w.page).map(Vec::as_slice).unwrap_or(&[]), w, &params, &mut rng_probe);
        probe_periods += trace.samples.iter().filter(|s| s.tick <= now).count() as u64;
        let mut prev_high = false;
        for s in &trace.samples {
            let high = s.access_time > params.peak_threshold;
            if high && !prev_high {
                events.push(Event { tick: s.tick, kind: EventKind::ProbeObservable(w.page) });
            }
            prev_high = high;
        }
        probes.push(trace);
    }
    events.sort_by_key(|e| e.tick);

    let background = RunMetrics { aex_count: bg.exits.len() as u64, l3_misses: bg.misses, wall_time: bg.offset_ms };
    let metrics = RunMetrics {
        aex_count: aex,
        l3_misses: bg.misses + (probe_periods as f64 * victim.misses_per_probe_period).round() as u64,
        wall_time: RunMetrics::wall_time_from_ticks(now, env.tick_rate) + bg.offset_ms,
    };
    Ok(RunOutput {
        trace: EventTrace { events },
        metrics,
        background,
        faults,
        probes,
        alarm,
        segments_completed: completed,
        end_tick: now,
    })
}
