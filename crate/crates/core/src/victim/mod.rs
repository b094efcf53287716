//! Victim enclaves modelled as sequences of segments with secret-dependent
//! duration and page-access scripts.

mod engine;
mod env;
mod profile;
pub mod tree;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::timing::{SegmentTimingModel, Tick};
use crate::Error;

pub use engine::{
    execute_run, Adversary, AexCause, Event, EventKind, EventTrace, NoAdversary, RunOutput, StaticPlan,
};
pub use env::{BaselineRow, EnvironmentProfile, Instrumentation, Workload};
pub use profile::{profile_constants, ProfileEstimate};
pub use tree::{discriminating_pages, label_classes, PageAccessSignature, TreeLayout};

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct PageId(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VictimKind {
    SquareMultiply,
    EcMulPoint,
    DecisionTree,
}

impl fmt::Display for VictimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VictimKind::SquareMultiply => "square-multiply",
            VictimKind::EcMulPoint => "ec-mul-point",
            VictimKind::DecisionTree => "decision-tree",
        })
    }
}

impl std::str::FromStr for VictimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "square-multiply" => Ok(VictimKind::SquareMultiply),
            "ec-mul-point" => Ok(VictimKind::EcMulPoint),
            "decision-tree" => Ok(VictimKind::DecisionTree),
            other => Err(Error::Victim(format!("unknown victim kind `{other}`"))),
        }
    }
}

/// Named pages and the script of pages each segment symbol touches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageLayout {
    pub names: Vec<String>,
    /// Segment-entry page; every script starts with it.
    pub entry: PageId,
    /// `scripts[v]` is the access order of a segment processing symbol `v`.
    pub scripts: Vec<Vec<PageId>>,
}

impl PageLayout {
    pub fn page(&self, name: &str) -> Option<PageId> {
        self.names.iter().position(|n| n == name).map(|i| PageId(i as u16))
    }

    pub fn name(&self, page: PageId) -> &str {
        &self.names[page.0 as usize]
    }

    pub fn pages(&self) -> impl Iterator<Item = PageId> + '_ {
        (0..self.names.len()).map(|i| PageId(i as u16))
    }

    fn validate(&self) -> Result<(), Error> {
        for (v, s) in self.scripts.iter().enumerate() {
            if s.first() != Some(&self.entry) {
                return Err(Error::Victim(format!("script for symbol {v} does not start at the entry page")));
            }
        }
        if self.scripts.len() == 2 && self.scripts[0] == self.scripts[1] {
            return Err(Error::Victim("0- and 1-segment scripts are identical".into()));
        }
        Ok(())
    }
}

fn names(ns: &[&str]) -> Vec<String> {
    ns.iter().map(|s| s.to_string()).collect()
}

fn square_multiply_layout() -> PageLayout {
    // A: exponentiation loop, B: squaring basecase (entry), C: multiply helper.
    let (a, b, c) = (PageId(0), PageId(1), PageId(2));
    PageLayout {
        names: names(&["A", "B", "C"]),
        entry: b,
        scripts: vec![vec![b, c, a], vec![b, c, a, c, a]],
    }
}

fn ec_mul_point_layout() -> PageLayout {
    // D: point doubling (entry), F: field arithmetic, E: point addition.
    let (d, f, e) = (PageId(0), PageId(1), PageId(2));
    PageLayout {
        names: names(&["D", "F", "E"]),
        entry: d,
        scripts: vec![vec![d, f], vec![d, f, e, f]],
    }
}

pub const TREE_LABELS: u8 = 10;
pub const TREE_NODES_PER_PAGE: usize = 3;

fn decision_tree_layout() -> (PageLayout, TreeLayout) {
    let tree = TreeLayout::balanced(TREE_LABELS, TREE_NODES_PER_PAGE).expect("static tree");
    let n = tree.n_node_pages();
    let mut ns: Vec<String> = (0..n).map(|i| format!("N{i}")).collect();
    ns.extend(["code", "roots", "split", "sample"].map(String::from));
    let aux = tree::AuxPages {
        code: PageId(n as u16),
        roots: PageId(n as u16 + 1),
        split: PageId(n as u16 + 2),
        sample: PageId(n as u16 + 3),
    };
    let scripts = (0..TREE_LABELS).map(|l| tree.script(l, aux)).collect();
    (PageLayout { names: ns, entry: tree.node_page(0), scripts }, tree)
}

/// Loose key/value constants for one victim, as read from a preset section.
pub type ConstantsTable = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimModel {
    pub kind: VictimKind,
    pub timing: SegmentTimingModel,
    /// Constants substituted by [`instrument_tsgx`].
    pub tsgx_timing: Option<SegmentTimingModel>,
    pub instrumented: bool,
    pub n_segments: usize,
    pub layout: PageLayout,
    pub tree: Option<TreeLayout>,
    /// Ticks an enclave exit and re-entry cost the victim.
    pub aex_cost: Tick,
    /// L3 misses the victim incurs per prime+probe period.
    pub misses_per_probe_period: f64,
}

fn required(params: &ConstantsTable, key: &str) -> Result<f64, Error> {
    let v = *params.get(key).ok_or_else(|| Error::Victim(format!("missing constant {key}")))?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Victim(format!("constant {key} must be a non-negative number, got {v}")));
    }
    Ok(v)
}

fn positive(params: &ConstantsTable, key: &str) -> Result<f64, Error> {
    let v = required(params, key)?;
    if v <= 0.0 {
        return Err(Error::Victim(format!("constant {key} must be positive")));
    }
    Ok(v)
}

fn ticks(v: f64) -> Tick {
    Tick(v.round() as u64)
}

fn timing_from(params: &ConstantsTable, prefix: &str, kind: VictimKind) -> Result<SegmentTimingModel, Error> {
    let key = |k: &str| format!("{prefix}{k}");
    let c_branch = required(params, &key("c_branch"))?;
    if kind != VictimKind::DecisionTree && c_branch <= 0.0 {
        return Err(Error::Victim("c_branch must be positive for bit-serial victims".into()));
    }
    let sigma0 = required(params, &key("sigma0"))?;
    let timing = SegmentTimingModel {
        c_base: ticks(positive(params, &key("c_base"))?),
        c_branch: ticks(c_branch),
        c_miss: ticks(params.get(&key("c_miss")).copied().unwrap_or(0.0).max(0.0)),
        sigma0,
        sigma1: params.get(&key("sigma1")).copied().unwrap_or(sigma0),
        stop_margin: ticks(positive(params, "stop_margin")?),
        callee_runtime: ticks(required(params, &key("callee_runtime")).or_else(|_| required(params, "callee_runtime"))?),
    };
    timing.validate()?;
    Ok(timing)
}

/// Build a victim from its constants. Keys prefixed `tsgx_` hold the timing
/// used once the victim is instrumented.
pub fn build_victim(kind: VictimKind, params: &ConstantsTable) -> Result<VictimModel, Error> {
    let timing = timing_from(params, "", kind)?;
    let tsgx_timing = if params.contains_key("tsgx_c_base") {
        Some(timing_from(params, "tsgx_", kind)?)
    } else {
        None
    };
    let n_segments = positive(params, "n_segments")? as usize;
    let (layout, tree) = match kind {
        VictimKind::SquareMultiply => (square_multiply_layout(), None),
        VictimKind::EcMulPoint => (ec_mul_point_layout(), None),
        VictimKind::DecisionTree => {
            let (l, t) = decision_tree_layout();
            (l, Some(t))
        }
    };
    layout.validate()?;
    Ok(VictimModel {
        kind,
        timing,
        tsgx_timing,
        instrumented: false,
        n_segments,
        layout,
        tree,
        aex_cost: ticks(positive(params, "aex_cost")?),
        misses_per_probe_period: required(params, "misses_per_probe_period")?,
    })
}

/// Wrap the victim in transactional instrumentation: T-SGX timing, abort and
/// restart on every exit, and a per-run exit counter.
pub fn instrument_tsgx(victim: &VictimModel) -> Result<VictimModel, Error> {
    if victim.instrumented {
        return Err(Error::Victim("victim is already instrumented".into()));
    }
    let timing = victim
        .tsgx_timing
        .ok_or_else(|| Error::Victim(format!("no instrumented constants for {}", victim.kind)))?;
    Ok(VictimModel { timing, tsgx_timing: None, instrumented: true, ..victim.clone() })
}

impl VictimModel {
    /// Number of distinct segment symbols (2 for bit-serial victims).
    pub fn alphabet(&self) -> usize {
        self.layout.scripts.len()
    }

    pub fn is_bit_serial(&self) -> bool {
        self.alphabet() == 2
    }

    pub fn entry_page(&self) -> PageId {
        self.layout.entry
    }

    pub fn script(&self, symbol: u8) -> &[PageId] {
        &self.layout.scripts[symbol as usize]
    }

    pub fn signatures(&self) -> Vec<PageAccessSignature> {
        self.layout
            .scripts
            .iter()
            .enumerate()
            .map(|(l, s)| PageAccessSignature { label: l as u8, sequence: s.clone() })
            .collect()
    }

    /// Same victim without segment-duration noise.
    pub fn noise_free(&self) -> VictimModel {
        let mut v = self.clone();
        v.timing.sigma0 = 0.0;
        v.timing.sigma1 = 0.0;
        if let Some(t) = v.tsgx_timing.as_mut() {
            t.sigma0 = 0.0;
            t.sigma1 = 0.0;
        }
        v
    }

    pub fn with_segments(&self, n: usize) -> VictimModel {
        VictimModel { n_segments: n, ..self.clone() }
    }

    pub fn check_secret(&self, secret: &[u8]) -> Result<(), Error> {
        if secret.len() != self.n_segments {
            return Err(Error::InvalidSecret(format!(
                "secret has {} symbols, victim runs {} segments",
                secret.len(),
                self.n_segments
            )));
        }
        if let Some(&s) = secret.iter().find(|&&s| s as usize >= self.alphabet()) {
            return Err(Error::InvalidSecret(format!("symbol {s} outside the victim's alphabet")));
        }
        Ok(())
    }

    /// Noise-free start tick of the segment after `prefix`.
    pub fn start_time(&self, prefix: &[u8]) -> Tick {
        if self.is_bit_serial() {
            self.timing.cumulative_start_time(prefix)
        } else {
            Tick(prefix.len() as u64 * self.timing.c_base.0)
        }
    }

    /// Expected noise-free run length over a uniformly random secret.
    pub fn nominal_duration(&self) -> Tick {
        let t = &self.timing;
        if self.is_bit_serial() {
            let n = self.n_segments as f64;
            let miss = if self.n_segments > 0 { t.c_miss.as_f64() * (1.0 - 0.5f64.powi(self.n_segments as i32)) } else { 0.0 };
            Tick((n * (t.c_base.as_f64() + 0.5 * t.c_branch.as_f64()) + miss).round() as u64)
        } else {
            Tick(self.n_segments as u64 * t.c_base.0)
        }
    }

    /// Offset at which access `j` of a segment lasting `duration` happens.
    pub fn access_offset(&self, j: usize, len: usize, duration: Tick) -> Tick {
        if j == 0 {
            return Tick::ZERO;
        }
        let r = self.timing.callee_runtime.0.min(duration.0);
        if len <= 1 {
            return Tick(r);
        }
        Tick(r + (j as u64 - 1) * (duration.0 - r) / (len as u64 - 1))
    }
}
