//! Attack strategies, sample voting, sliding-window merging and the
//! orchestration that recovers a whole secret over many victim runs.

mod probes;
mod segment;
mod tree;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channels::Guess;
use crate::timing::{RunMetrics, SegmentTimingModel, Tick};
use crate::victim::{profile_constants, EnvironmentProfile, RunOutput, VictimModel};
use crate::Error;

pub use segment::{
    attack_segment_page_cache, attack_segment_page_fault, attack_window_cache_only, standard_attack,
    cache_only_lead,
};
pub use tree::{attack_label_presence, presence_pages};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    PageFault,
    PageCache,
    CacheOnly,
    StandardPage,
    StandardCache,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::PageFault, Strategy::PageCache, Strategy::CacheOnly, Strategy::StandardPage, Strategy::StandardCache];

    pub fn key(self) -> &'static str {
        match self {
            Strategy::PageFault => "page_fault",
            Strategy::PageCache => "page_cache",
            Strategy::CacheOnly => "cache_only",
            Strategy::StandardPage => "standard_page",
            Strategy::StandardCache => "standard_cache",
        }
    }

    /// Strategies that leak one target per run.
    pub fn is_spread(self) -> bool {
        !matches!(self, Strategy::StandardPage | Strategy::StandardCache)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|k| k.key() == norm || k.key().replace('_', "") == norm)
            .ok_or_else(|| Error::Config(format!("unknown attack strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub strategy: Strategy,
    /// Sliding-window width, CacheOnly only.
    pub window: usize,
    /// Samples per target `k`.
    pub samples: usize,
    /// Override of the victim's stop margin `c`.
    pub stop_margin: Option<Tick>,
    /// Override of the victim's callee runtime `r`.
    pub callee_runtime: Option<Tick>,
}

impl AttackConfig {
    pub fn new(strategy: Strategy, samples: usize) -> Self {
        Self { strategy, window: 1, samples, stop_margin: None, callee_runtime: None }
    }

    pub fn cache_only(window: usize, samples: usize) -> Self {
        Self { window, ..Self::new(Strategy::CacheOnly, samples) }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.window == 0 || self.samples == 0 {
            return Err(Error::Attack("window and samples must be at least 1".into()));
        }
        if self.window != 1 && self.strategy != Strategy::CacheOnly {
            return Err(Error::Attack(format!("{} attacks one segment at a time (w = 1)", self.strategy)));
        }
        Ok(())
    }

    /// The attacker's timing model: profiled constants with this config's margins.
    pub fn model(&self, profiled: SegmentTimingModel) -> SegmentTimingModel {
        SegmentTimingModel {
            stop_margin: self.stop_margin.unwrap_or(profiled.stop_margin),
            callee_runtime: self.callee_runtime.unwrap_or(profiled.callee_runtime),
            ..profiled
        }
    }
}

/// Bookkeeping for one victim run issued by an attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Seed of the run.
    pub run: u64,
    /// 1-based segment the run targeted, 0 for whole-run attacks.
    pub target: usize,
    pub metrics: RunMetrics,
    pub background: RunMetrics,
    pub aex_delta: u64,
    pub alarm: bool,
    pub segments_completed: usize,
}

impl RunRecord {
    pub(crate) fn from_output(run: u64, target: usize, out: &RunOutput) -> Self {
        Self {
            run,
            target,
            metrics: out.metrics,
            background: out.background,
            aex_delta: out.aex_delta(),
            alarm: out.alarm,
            segments_completed: out.segments_completed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitSample {
    /// 1-based segment index.
    pub segment: usize,
    pub guess: Guess,
    pub run: RunRecord,
}

/// Per-segment guesses of one window run, covering segments `first..first+len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowGuess {
    pub first: usize,
    pub guesses: Vec<Guess>,
}

impl WindowGuess {
    pub fn last(&self) -> Guess {
        *self.guesses.last().expect("non-empty window")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Vote {
    Bit0,
    Bit1,
    Undecided,
}

impl Vote {
    pub fn bit(self) -> Option<u8> {
        match self {
            Vote::Bit0 => Some(0),
            Vote::Bit1 => Some(1),
            Vote::Undecided => None,
        }
    }
}

/// Strict majority among classifiable guesses; ties and empty input are undecided.
pub fn vote_guesses(guesses: impl IntoIterator<Item = Guess>) -> Vote {
    let (mut zeros, mut ones) = (0usize, 0usize);
    for g in guesses {
        match g {
            Guess::Bit0 => zeros += 1,
            Guess::Bit1 => ones += 1,
            Guess::Unclassifiable => {}
        }
    }
    match zeros.cmp(&ones) {
        std::cmp::Ordering::Greater => Vote::Bit0,
        std::cmp::Ordering::Less => Vote::Bit1,
        std::cmp::Ordering::Equal => Vote::Undecided,
    }
}

pub fn majority_vote(samples: &[BitSample]) -> Vote {
    vote_guesses(samples.iter().map(|s| s.guess))
}

/// Plurality over label guesses; a tie for first place is undecided.
pub fn vote_labels(guesses: impl IntoIterator<Item = Option<u8>>) -> Option<u8> {
    let mut counts = std::collections::BTreeMap::<u8, usize>::new();
    for g in guesses.into_iter().flatten() {
        *counts.entry(g).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    let mut top = counts.iter().filter(|(_, &c)| c == best);
    let (&label, _) = top.next()?;
    top.next().is_none().then_some(label)
}

/// Accept `cur`'s last guess iff `cur` follows `prev` by one segment and the
/// overlapping guesses agree and are all classifiable.
pub fn merge_windows(prev: &WindowGuess, cur: &WindowGuess) -> Option<u8> {
    let w = cur.guesses.len();
    if w == 0 || prev.guesses.len() != w || cur.first != prev.first + 1 {
        return None;
    }
    let overlap_ok = prev.guesses[1..]
        .iter()
        .zip(&cur.guesses[..w - 1])
        .all(|(a, b)| a == b && *a != Guess::Unclassifiable);
    if overlap_ok {
        cur.last().bit()
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub strategy: Strategy,
    pub window: usize,
    pub samples: usize,
    pub truth: Vec<u8>,
    /// Recovered symbols; undecided positions hold 0.
    pub recovered: Vec<u8>,
    pub decided: Vec<bool>,
    /// Share of classifiable samples agreeing with each decision.
    pub confidence: Vec<f64>,
    pub accuracy: f64,
    pub runs: Vec<RunRecord>,
    /// The instrumentation's alarm stopped the attack.
    pub alarm: bool,
}

impl RecoveryReport {
    pub(crate) fn finish(
        config: &AttackConfig,
        truth: &[u8],
        decisions: Vec<(Option<u8>, f64)>,
        runs: Vec<RunRecord>,
        alarm: bool,
    ) -> Self {
        let recovered: Vec<u8> = decisions.iter().map(|(d, _)| d.unwrap_or(0)).collect();
        let decided: Vec<bool> = decisions.iter().map(|(d, _)| d.is_some()).collect();
        let correct = decisions.iter().zip(truth).filter(|((d, _), t)| *d == Some(**t)).count();
        let accuracy = if alarm { 0.0 } else { correct as f64 / truth.len() as f64 };
        Self {
            strategy: config.strategy,
            window: config.window,
            samples: config.samples,
            truth: truth.to_vec(),
            recovered,
            decided,
            confidence: decisions.iter().map(|(_, c)| *c).collect(),
            accuracy,
            runs,
            alarm,
        }
    }

    pub fn total_runs(&self) -> usize {
        self.runs.len()
    }

    pub fn undecided(&self) -> usize {
        self.decided.iter().filter(|d| !**d).count()
    }
}

pub(crate) fn confidence(guesses: &[Guess], decision: Option<u8>) -> f64 {
    let classifiable: Vec<u8> = guesses.iter().filter_map(|g| g.bit()).collect();
    match decision {
        Some(b) if !classifiable.is_empty() => {
            classifiable.iter().filter(|&&x| x == b).count() as f64 / classifiable.len() as f64
        }
        _ => 0.0,
    }
}

/// Seed offset of attempt `j` at target `i`.
pub(crate) fn run_index(target: usize, attempt: usize) -> u64 {
    ((target as u64) << 20) | attempt as u64
}

pub const PROFILE_REPS: usize = 1000;

/// Recover `secret` from the victim: profile, then attack every target left
/// to right with fresh runs, extending the recovered prefix as it goes.
pub fn recover_secret(
    victim: &VictimModel,
    env: &EnvironmentProfile,
    secret: &[u8],
    config: &AttackConfig,
) -> Result<RecoveryReport, Error> {
    let profiled = profile_constants(victim, env, PROFILE_REPS)?;
    recover_secret_with_model(victim, env, secret, config, &config.model(profiled.timing))
}

pub fn recover_secret_with_model(
    victim: &VictimModel,
    env: &EnvironmentProfile,
    secret: &[u8],
    config: &AttackConfig,
    model: &SegmentTimingModel,
) -> Result<RecoveryReport, Error> {
    config.validate()?;
    victim.check_secret(secret)?;
    if !victim.is_bit_serial() {
        return tree::recover_labels(victim, env, secret, config, model);
    }
    match config.strategy {
        Strategy::PageFault | Strategy::PageCache => segment::recover_per_segment(victim, env, secret, config, model),
        Strategy::CacheOnly => segment::recover_windowed(victim, env, secret, config, model),
        Strategy::StandardPage | Strategy::StandardCache => {
            standard_attack(victim, env, secret, config.strategy, config.samples, model)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use proptest::prelude::*;
    use proptest::strategy::Strategy as _;
    use Guess::{Bit0 as Z, Bit1 as O, Unclassifiable as U};

    #[test]
    fn vote_examples() {
        assert_eq!(vote_guesses([O, O, Z]), Vote::Bit1);
        assert_eq!(vote_guesses([Z, Z, Z, O, O]), Vote::Bit0);
        assert_eq!(vote_guesses([O, Z]), Vote::Undecided);
        assert_eq!(vote_guesses([U, U]), Vote::Undecided);
        assert_eq!(vote_guesses([U, O]), Vote::Bit1);
    }

    #[test]
    fn label_vote() {
        assert_eq!(vote_labels([Some(3), Some(3), Some(1)]), Some(3));
        assert_eq!(vote_labels([Some(3), Some(1)]), None);
        assert_eq!(vote_labels([None, None]), None);
    }

    #[test]
    fn merge_examples() {
        let prev = WindowGuess { first: 2, guesses: vec![O, Z, O] };
        let cur = WindowGuess { first: 3, guesses: vec![Z, O, O] };
        assert_eq!(merge_windows(&prev, &cur), Some(1));
        let bad = WindowGuess { first: 3, guesses: vec![O, O, O] };
        assert_eq!(merge_windows(&prev, &bad), None);
        let unk = WindowGuess { first: 3, guesses: vec![U, O, O] };
        let prev_unk = WindowGuess { first: 2, guesses: vec![O, U, O] };
        assert_eq!(merge_windows(&prev_unk, &unk), None);
        let single = WindowGuess { first: 3, guesses: vec![Z] };
        assert_eq!(merge_windows(&WindowGuess { first: 2, guesses: vec![O] }, &single), Some(0));
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::new(Strategy::PageFault, 9).validate().is_ok());
        assert!(AttackConfig { window: 3, ..AttackConfig::new(Strategy::PageFault, 9) }.validate().is_err());
        assert!(AttackConfig::cache_only(0, 9).validate().is_err());
        assert!(AttackConfig::cache_only(9, 0).validate().is_err());
        assert_eq!("cache-only".parse::<Strategy>().unwrap(), Strategy::CacheOnly);
    }

    fn guess() -> impl proptest::strategy::Strategy<Value = Guess> {
        prop_oneof![Just(Z), Just(O), Just(U)]
    }

    proptest! {
        #[test]
        fn merge_accepts_iff_overlap_agrees(
            w in 1usize..8,
            a in prop::collection::vec(guess(), 8),
            b in prop::collection::vec(guess(), 8),
        ) {
            let prev = WindowGuess { first: 1, guesses: a[..w].to_vec() };
            let cur = WindowGuess { first: 2, guesses: b[..w].to_vec() };
            let agree = (0..w - 1).all(|j| prev.guesses[j + 1] == cur.guesses[j] && cur.guesses[j] != U);
            let merged = merge_windows(&prev, &cur);
            prop_assert_eq!(merged.is_some(), agree && cur.last() != U);
            if let Some(bit) = merged {
                prop_assert_eq!(Some(bit), cur.last().bit());
            }
        }

        #[test]
        fn vote_is_permutation_invariant_and_complements(
            mut gs in prop::collection::vec(guess(), 1..15),
            seed in any::<u64>(),
        ) {
            let v = vote_guesses(gs.clone());
            let n = gs.len();
            // Deterministic shuffle.
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                gs.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(vote_guesses(gs.clone()), v);
            let flipped = gs.iter().map(|g| match g { Z => O, O => Z, U => U });
            let expect = match v { Vote::Bit0 => Vote::Bit1, Vote::Bit1 => Vote::Bit0, Vote::Undecided => Vote::Undecided };
            prop_assert_eq!(vote_guesses(flipped), expect);
        }
    }
}
