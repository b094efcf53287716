//! Attacker-facing side channels: permission-bit page traps and L3
//! prime+probe sampling of a single cache set.
//!
//! Traps are live state inside a [`RunContext`] and interact with the victim
//! as it executes. Probing is passive: a window is recorded during the run and
//! its trace is materialised afterwards from the victim's page accesses with
//! [`prime_probe`].

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::timing::{SegmentTimingModel, Tick};
use crate::victim::PageId;
use crate::Error;

/// Prime+probe calibration. Defaults are the fixed simulator constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    /// Sampling period of the probe loop.
    pub period: Tick,
    /// Access time above which a sample counts as a victim access.
    pub peak_threshold: f64,
    pub low_level: f64,
    pub high_level: f64,
    /// Gaussian noise on both levels.
    pub noise: f64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self {
            period: Tick(2_000),
            peak_threshold: 1_000.0,
            low_level: 600.0,
            high_level: 1_400.0,
            noise: 0.0,
        }
    }
}

impl ProbeParams {
    /// "Close peaks" tolerance around an expected inter-peak gap.
    pub fn gap_tolerance(&self) -> Tick {
        Tick(3 * self.period.0)
    }

    /// Consecutive low samples that confirm a long (1-bit) segment.
    pub fn min_lows(&self, timing: &SegmentTimingModel) -> usize {
        (0.5 * timing.c0().as_f64() / self.period.as_f64()).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageTrap {
    pub page: PageId,
    pub arm_tick: Tick,
    pub armed: bool,
    pub auto_rearm_delay: Option<Tick>,
}

/// One executed probe sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub tick: Tick,
    pub access_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrace {
    pub samples: Vec<ProbeSample>,
    pub period: Tick,
}

impl ProbeTrace {
    pub fn start(&self) -> Tick {
        self.samples
            .first()
            .map(|s| s.tick.saturating_sub(self.period))
            .unwrap_or_default()
    }

    pub fn end(&self) -> Tick {
        self.samples.last().map(|s| s.tick).unwrap_or_default()
    }

    pub fn is_peak(&self, i: usize, params: &ProbeParams) -> bool {
        self.samples[i].access_time > params.peak_threshold
    }

    /// Sample ticks that start a run of peak samples.
    pub fn peak_ticks(&self, params: &ProbeParams) -> Vec<Tick> {
        let mut peaks = Vec::new();
        let mut prev_high = false;
        for (i, s) in self.samples.iter().enumerate() {
            let high = self.is_peak(i, params);
            if high && !prev_high {
                peaks.push(s.tick);
            }
            prev_high = high;
        }
        peaks
    }

    fn lows_after(&self, tick: Tick, params: &ProbeParams) -> usize {
        let start = self.samples.partition_point(|s| s.tick <= tick);
        self.samples[start..]
            .iter()
            .take_while(|s| s.access_time <= params.peak_threshold)
            .count()
    }
}

/// A scheduled prime+probe window on one page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeWindow {
    pub page: PageId,
    pub start: Tick,
    pub duration: Tick,
}

impl ProbeWindow {
    pub fn periods(&self, params: &ProbeParams) -> u64 {
        self.duration.0.div_ceil(params.period.0)
    }
}

/// Sample a prime+probe window against the victim's recorded accesses to
/// `page` (sorted ticks). Sample `m` covers `[start + (m-1)p, start + mp)` and
/// is a peak iff the victim touched the page during it.
pub fn prime_probe<R: Rng + ?Sized>(
    accesses: &[Tick],
    window: ProbeWindow,
    params: &ProbeParams,
    rng: &mut R,
) -> ProbeTrace {
    let n = window.periods(params);
    let noise = (params.noise > 0.0).then(|| Normal::new(0.0, params.noise).expect("finite noise"));
    let mut samples = Vec::with_capacity(n as usize);
    let mut cursor = accesses.partition_point(|&t| t < window.start);
    for m in 1..=n {
        let hi = window.start + Tick(m * params.period.0);
        let mut touched = false;
        while cursor < accesses.len() && accesses[cursor] < hi {
            touched = true;
            cursor += 1;
        }
        let level = if touched { params.high_level } else { params.low_level };
        let jitter = noise.as_ref().map(|d| d.sample(rng)).unwrap_or(0.0);
        samples.push(ProbeSample { tick: hi, access_time: level + jitter });
    }
    ProbeTrace { samples, period: params.period }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifyMode {
    /// No peak inside the window means the long branch is still running.
    WindowAbsence,
    /// Inter-peak spacing of the entry-page accesses.
    TwoPeakSpacing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Guess {
    Bit0,
    Bit1,
    Unclassifiable,
}

impl Guess {
    pub fn bit(self) -> Option<u8> {
        match self {
            Guess::Bit0 => Some(0),
            Guess::Bit1 => Some(1),
            Guess::Unclassifiable => None,
        }
    }

    pub fn from_bit(bit: u8) -> Guess {
        if bit == 0 {
            Guess::Bit0
        } else {
            Guess::Bit1
        }
    }
}

/// Classify a single-segment probe trace.
pub fn classify_probe_trace(
    trace: &ProbeTrace,
    timing: &SegmentTimingModel,
    mode: ClassifyMode,
    params: &ProbeParams,
) -> Guess {
    if trace.samples.is_empty() {
        return Guess::Unclassifiable;
    }
    match mode {
        ClassifyMode::WindowAbsence => {
            if (0..trace.samples.len()).any(|i| trace.is_peak(i, params)) {
                Guess::Bit0
            } else {
                Guess::Bit1
            }
        }
        ClassifyMode::TwoPeakSpacing => decode_peaks(trace, timing, 1, params)[0],
    }
}

/// Decode `count` consecutive segments from a probe trace whose first peak is
/// taken as the start of the first segment. Peaks closer than a 0-segment to
/// the last accepted peak are treated as spurious.
pub fn decode_peaks(
    trace: &ProbeTrace,
    timing: &SegmentTimingModel,
    count: usize,
    params: &ProbeParams,
) -> Vec<Guess> {
    PeakDecoder { trace, timing, params, exits: &[], end: None }.decode(count)
}

/// Inter-peak decoder with side information the attacker has anyway: the
/// exits it observed (tick, cost), whose cost is removed from any gap they
/// fall into, and the tick the enclave returned, which bounds the last segment.
#[derive(Debug, Clone, Copy)]
pub struct PeakDecoder<'a> {
    pub trace: &'a ProbeTrace,
    pub timing: &'a SegmentTimingModel,
    pub params: &'a ProbeParams,
    pub exits: &'a [(Tick, Tick)],
    pub end: Option<Tick>,
}

impl PeakDecoder<'_> {
    fn corrected_gap(&self, from: Tick, to: Tick) -> Tick {
        let stalled: u64 = self.exits.iter().filter(|(t, _)| *t > from && *t < to).map(|(_, c)| c.0).sum();
        Tick((to - from).0.saturating_sub(stalled))
    }

    pub fn decode(&self, count: usize) -> Vec<Guess> {
        let params = self.params;
        let mut peaks = self.trace.peak_ticks(params);
        if let Some(end) = self.end {
            if end <= self.trace.end() && peaks.last().is_none_or(|&p| p < end) {
                peaks.push(end);
            }
        }
        let mut guesses = Vec::with_capacity(count);
        let tol = params.gap_tolerance();
        let min_lows = params.min_lows(self.timing);
        let c0 = self.timing.c0();
        let c1 = self.timing.c1();
        let c1_cold = c1 + self.timing.c_miss;

        let Some((&first, rest)) = peaks.split_first() else {
            return vec![Guess::Unclassifiable; count];
        };
        let targets = [(c0, Guess::Bit0), (c1, Guess::Bit1), (c1_cold, Guess::Bit1)];
        let fit = |gap: Tick| {
            targets
                .iter()
                .map(|&(t, g)| (gap.0.abs_diff(t.0), g))
                .filter(|&(d, _)| d <= tol.0)
                .min_by_key(|&(d, _)| d)
        };
        let mut anchor = first;
        let mut rest = rest;
        while guesses.len() < count {
            // Skip spurious peaks, then take the best-fitting of the peaks
            // that could end this segment; passing over a peak costs half
            // the tolerance.
            let skip = rest.iter().take_while(|&&p| self.corrected_gap(anchor, p).0 + tol.0 < c0.0).count();
            rest = &rest[skip..];
            let best = rest
                .iter()
                .enumerate()
                .take_while(|&(_, &p)| self.corrected_gap(anchor, p).0 <= c1_cold.0 + tol.0)
                .filter_map(|(k, &p)| fit(self.corrected_gap(anchor, p)).map(|(d, g)| (d + k as u64 * tol.0 / 2, k, g)))
                .min_by_key(|&(d, k, _)| (d, k));
            match best {
                Some((_, k, g)) => {
                    guesses.push(g);
                    anchor = rest[k];
                    rest = &rest[k + 1..];
                }
                None => {
                    let ended = self.end.is_some_and(|e| e <= anchor);
                    let guess = if rest.is_empty() && !ended && self.trace.lows_after(anchor, params) >= min_lows {
                        Guess::Bit1
                    } else {
                        Guess::Unclassifiable
                    };
                    guesses.push(guess);
                    break;
                }
            }
        }
        guesses.resize(count, Guess::Unclassifiable);
        guesses
    }
}

/// A page fault observed by the attacker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub page: PageId,
    pub tick: Tick,
    /// When the OS hands control back to the enclave.
    pub resume: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    Arm(PageId),
    Disarm(PageId),
}

/// Per-run attacker state: trap table, pending timed actions and probe windows.
///
/// All requested times pass through the attacker's timer, which adds
/// Gaussian jitter of `timer_jitter` ticks.
#[derive(Debug)]
pub struct RunContext {
    traps: BTreeMap<PageId, PageTrap>,
    pending: BinaryHeap<Reverse<(Tick, u64, ActionKey)>>,
    seq: u64,
    probes: Vec<ProbeWindow>,
    now: Tick,
    horizon: Tick,
    timer_jitter: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

// BinaryHeap needs Ord on the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct ActionKey(u8, PageId);

impl From<Action> for ActionKey {
    fn from(a: Action) -> Self {
        match a {
            Action::Arm(p) => ActionKey(0, p),
            Action::Disarm(p) => ActionKey(1, p),
        }
    }
}

impl From<ActionKey> for Action {
    fn from(k: ActionKey) -> Self {
        match k.0 {
            0 => Action::Arm(k.1),
            _ => Action::Disarm(k.1),
        }
    }
}

impl RunContext {
    pub fn new(horizon: Tick, timer_jitter: f64, rng: ChaCha8Rng) -> Self {
        Self {
            traps: BTreeMap::new(),
            pending: BinaryHeap::new(),
            seq: 0,
            probes: Vec::new(),
            now: Tick::ZERO,
            horizon,
            timer_jitter: (timer_jitter > 0.0).then(|| Normal::new(0.0, timer_jitter).expect("finite jitter")),
            rng,
        }
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    /// Upper bound on the victim's run length, for sanity checks.
    pub fn horizon(&self) -> Tick {
        self.horizon
    }

    pub(crate) fn set_now(&mut self, now: Tick) {
        self.now = now;
    }

    /// Timer-driven actions land with jitter; ones due already act at once.
    fn jittered(&mut self, tick: Tick) -> Tick {
        if tick <= self.now {
            return self.now;
        }
        let t = match &self.timer_jitter {
            Some(d) => tick.offset(d.sample(&mut self.rng).round() as i64),
            None => tick,
        };
        t.max(self.now)
    }

    fn push(&mut self, tick: Tick, action: Action) {
        self.seq += 1;
        self.pending.push(Reverse((tick, self.seq, action.into())));
    }

    /// Arm a trap on `page` at `arm_tick`. With `rearm_after`, the trap arms
    /// itself again that many ticks after the victim resumes from each fault.
    pub fn schedule_page_trap(
        &mut self,
        page: PageId,
        arm_tick: Tick,
        rearm_after: Option<Tick>,
    ) -> Result<PageTrap, Error> {
        if arm_tick > self.horizon {
            return Err(Error::Channel(format!(
                "arm tick {arm_tick} beyond run horizon {}",
                self.horizon
            )));
        }
        if self.traps.contains_key(&page) {
            return Err(Error::Channel(format!("page {} already has an active trap", page.0)));
        }
        let arm_tick = self.jittered(arm_tick);
        let trap = PageTrap { page, arm_tick, armed: false, auto_rearm_delay: rearm_after };
        self.traps.insert(page, trap);
        self.push(arm_tick, Action::Arm(page));
        Ok(trap)
    }

    /// Remove the trap on `page` at `tick`, armed or not.
    pub fn disarm_at(&mut self, page: PageId, tick: Tick) {
        let tick = self.jittered(tick);
        self.push(tick, Action::Disarm(page));
    }

    /// Arm a trap on `page` right away, from inside a fault handler.
    pub fn arm_now(&mut self, page: PageId) {
        let arm_tick = self.now;
        self.traps.insert(page, PageTrap { page, arm_tick, armed: true, auto_rearm_delay: None });
    }

    /// Drop the trap on `page` right away, from inside a fault handler.
    pub fn disarm_now(&mut self, page: PageId) {
        self.traps.remove(&page);
    }

    pub fn has_trap(&self, page: PageId) -> bool {
        self.traps.contains_key(&page)
    }

    /// Record a prime+probe window on `page` starting at `start`.
    pub fn prime_probe(&mut self, page: PageId, start: Tick, duration: Tick) -> usize {
        let start = self.jittered(start);
        self.probes.push(ProbeWindow { page, start, duration });
        self.probes.len() - 1
    }

    /// Push every pending action and unstarted probe later by `delay`, and
    /// stretch running probes by as much, e.g. to absorb an interrupt the
    /// attacker saw delay the victim.
    pub fn defer_pending(&mut self, delay: Tick) {
        let items: Vec<_> = self.pending.drain().collect();
        for Reverse((t, s, a)) in items {
            self.pending.push(Reverse((t + delay, s, a)));
        }
        for trap in self.traps.values_mut() {
            if !trap.armed {
                trap.arm_tick += delay;
            }
        }
        let now = self.now;
        for w in self.probes.iter_mut() {
            if w.start > now {
                w.start += delay;
            } else if w.start + w.duration > now {
                w.duration += delay;
            }
        }
    }

    pub(crate) fn apply_due(&mut self, now: Tick) {
        while let Some(Reverse((t, _, key))) = self.pending.peek().copied() {
            if t > now {
                break;
            }
            self.pending.pop();
            match Action::from(key) {
                Action::Arm(page) => {
                    if let Some(trap) = self.traps.get_mut(&page) {
                        if trap.arm_tick == t {
                            trap.armed = true;
                        }
                    }
                }
                Action::Disarm(page) => {
                    self.traps.remove(&page);
                }
            }
        }
    }

    pub(crate) fn is_armed(&self, page: PageId) -> bool {
        self.traps.get(&page).is_some_and(|t| t.armed)
    }

    /// Consume the armed trap on a fault, scheduling its auto re-arm.
    pub(crate) fn fire(&mut self, page: PageId, resume: Tick) {
        if let Some(trap) = self.traps.remove(&page) {
            if let Some(delay) = trap.auto_rearm_delay {
                let arm_tick = resume + delay;
                self.traps.insert(page, PageTrap { arm_tick, armed: false, ..trap });
                self.push(arm_tick, Action::Arm(page));
            }
        }
    }

    pub(crate) fn take_probes(&mut self) -> Vec<ProbeWindow> {
        std::mem::take(&mut self.probes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params() -> ProbeParams {
        ProbeParams::default()
    }

    fn timing() -> SegmentTimingModel {
        SegmentTimingModel {
            c_base: Tick(46_400),
            c_branch: Tick(46_500),
            c_miss: Tick(0),
            sigma0: 0.0,
            sigma1: 0.0,
            stop_margin: Tick(5_000),
            callee_runtime: Tick(20_880),
        }
    }

    fn synthetic(peaks: &[usize], len: usize) -> ProbeTrace {
        let p = params();
        ProbeTrace {
            samples: (0..len)
                .map(|i| ProbeSample {
                    tick: Tick((i as u64 + 1) * p.period.0),
                    access_time: if peaks.contains(&i) { p.high_level } else { p.low_level },
                })
                .collect(),
            period: p.period,
        }
    }

    #[test]
    fn single_access_gives_single_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = ProbeWindow { page: PageId(1), start: Tick(0), duration: Tick(40_000) };
        let t = prime_probe(&[Tick(9_000)], w, &params(), &mut rng);
        assert_eq!(t.samples.len(), 20);
        assert_eq!(t.peak_ticks(&params()), vec![Tick(10_000)]);
    }

    #[test]
    fn two_peak_spacing_examples() {
        let tm = timing();
        // One peak, then 20 lows.
        let t = synthetic(&[0], 21);
        assert_eq!(classify_probe_trace(&t, &tm, ClassifyMode::TwoPeakSpacing, &params()), Guess::Bit1);
        // Peaks c0 apart: 46400 / 2000 ~ 23 samples.
        let t = synthetic(&[0, 23], 46);
        assert_eq!(classify_probe_trace(&t, &tm, ClassifyMode::TwoPeakSpacing, &params()), Guess::Bit0);
        let t = synthetic(&[], 46);
        assert_eq!(
            classify_probe_trace(&t, &tm, ClassifyMode::TwoPeakSpacing, &params()),
            Guess::Unclassifiable
        );
        // Peak with too few lows behind it.
        let t = synthetic(&[40], 46);
        assert_eq!(
            classify_probe_trace(&t, &tm, ClassifyMode::TwoPeakSpacing, &params()),
            Guess::Unclassifiable
        );
    }

    #[test]
    fn window_absence() {
        let tm = timing();
        let t = synthetic(&[], 10);
        assert_eq!(classify_probe_trace(&t, &tm, ClassifyMode::WindowAbsence, &params()), Guess::Bit1);
        let t = synthetic(&[9], 10);
        assert_eq!(classify_probe_trace(&t, &tm, ClassifyMode::WindowAbsence, &params()), Guess::Bit0);
    }

    #[test]
    fn decode_skips_spurious_peaks() {
        let tm = timing();
        // 0-gap (23), spurious at 30, then a 1-gap (23 + 46 = 69).
        let t = synthetic(&[0, 23, 30, 69], 120);
        assert_eq!(decode_peaks(&t, &tm, 3, &params()), vec![Guess::Bit0, Guess::Bit1, Guess::Bit1]);
    }

    #[test]
    fn duplicate_trap_rejected() {
        let mut ctx = RunContext::new(Tick(1_000_000), 0.0, ChaCha8Rng::seed_from_u64(0));
        ctx.schedule_page_trap(PageId(0), Tick(10), None).unwrap();
        assert!(ctx.schedule_page_trap(PageId(0), Tick(20), None).is_err());
        assert!(ctx.schedule_page_trap(PageId(1), Tick(2_000_000), None).is_err());
    }

    #[test]
    fn trap_arms_only_when_due() {
        let mut ctx = RunContext::new(Tick(1_000_000), 0.0, ChaCha8Rng::seed_from_u64(0));
        ctx.schedule_page_trap(PageId(3), Tick(100), Some(Tick(50))).unwrap();
        ctx.apply_due(Tick(99));
        assert!(!ctx.is_armed(PageId(3)));
        ctx.apply_due(Tick(100));
        assert!(ctx.is_armed(PageId(3)));
        ctx.fire(PageId(3), Tick(200));
        assert!(!ctx.is_armed(PageId(3)));
        ctx.apply_due(Tick(249));
        assert!(!ctx.is_armed(PageId(3)));
        ctx.apply_due(Tick(250));
        assert!(ctx.is_armed(PageId(3)));
    }
}
