//! The adversaries driving single victim runs, one per strategy.

use crate::channels::{FaultRecord, RunContext};
use crate::timing::Tick;
use crate::victim::{Adversary, PageId};
use crate::Error;

/// Exits the attacker saw, with the stall each one caused.
#[derive(Debug, Clone, Default)]
pub(crate) struct ExitLog(pub Vec<(Tick, Tick)>);

impl ExitLog {
    fn record(&mut self, ctx: &mut RunContext, tick: Tick, cost: Tick) {
        self.0.push((tick, cost));
        ctx.defer_pending(cost);
    }

    pub fn stalled_between(&self, from: Tick, to: Tick) -> Tick {
        Tick(self.0.iter().filter(|(t, _)| *t > from && *t < to).map(|(_, c)| c.0).sum())
    }
}

/// Stop the victim at the entry of the target segment, then time the next
/// entry with a second, guarded trap.
pub(crate) struct StopAndMeasure {
    pub entry: PageId,
    pub arm_at: Tick,
    pub rearm_after: Tick,
    pub faults: Vec<FaultRecord>,
    pub exits: ExitLog,
}

impl StopAndMeasure {
    pub fn new(entry: PageId, arm_at: Tick, rearm_after: Tick) -> Self {
        Self { entry, arm_at, rearm_after, faults: Vec::new(), exits: ExitLog::default() }
    }
}

impl Adversary for StopAndMeasure {
    fn on_start(&mut self, ctx: &mut RunContext) -> Result<(), Error> {
        ctx.schedule_page_trap(self.entry, self.arm_at, Some(self.rearm_after))?;
        Ok(())
    }

    fn on_fault(&mut self, ctx: &mut RunContext, fault: FaultRecord) {
        self.faults.push(fault);
        if self.faults.len() >= 2 {
            ctx.disarm_now(self.entry);
        }
    }

    fn on_aex(&mut self, ctx: &mut RunContext, tick: Tick, cost: Tick) {
        self.exits.record(ctx, tick, cost);
    }
}

/// Stop at the target segment, wait out the callee, then watch the entry
/// page's cache set until a 0-segment would have ended.
pub(crate) struct StopAndProbe {
    pub entry: PageId,
    pub arm_at: Tick,
    pub wait: Tick,
    pub probe_for: Tick,
    pub fault: Option<FaultRecord>,
    pub exits: ExitLog,
}

impl StopAndProbe {
    pub fn new(entry: PageId, arm_at: Tick, wait: Tick, probe_for: Tick) -> Self {
        Self { entry, arm_at, wait, probe_for, fault: None, exits: ExitLog::default() }
    }
}

impl Adversary for StopAndProbe {
    fn on_start(&mut self, ctx: &mut RunContext) -> Result<(), Error> {
        ctx.schedule_page_trap(self.entry, self.arm_at, None)?;
        Ok(())
    }

    fn on_fault(&mut self, ctx: &mut RunContext, fault: FaultRecord) {
        if self.fault.is_none() {
            self.fault = Some(fault);
            ctx.prime_probe(self.entry, fault.resume + self.wait, self.probe_for);
        }
    }

    fn on_aex(&mut self, ctx: &mut RunContext, tick: Tick, cost: Tick) {
        self.exits.record(ctx, tick, cost);
    }
}

/// One probe window, no traps.
pub(crate) struct ProbeOnly {
    pub page: PageId,
    pub start: Tick,
    pub duration: Tick,
    pub exits: ExitLog,
}

impl Adversary for ProbeOnly {
    fn on_start(&mut self, ctx: &mut RunContext) -> Result<(), Error> {
        ctx.prime_probe(self.page, self.start, self.duration);
        Ok(())
    }

    fn on_aex(&mut self, ctx: &mut RunContext, tick: Tick, cost: Tick) {
        self.exits.record(ctx, tick, cost);
    }
}

/// Trap every page for the whole run; each fault re-arms all other pages,
/// so every page transition is observed.
pub(crate) struct TrapEverything {
    pub pages: Vec<PageId>,
    pub faults: Vec<FaultRecord>,
}

impl Adversary for TrapEverything {
    fn on_start(&mut self, ctx: &mut RunContext) -> Result<(), Error> {
        for &p in &self.pages {
            ctx.arm_now(p);
        }
        Ok(())
    }

    fn on_fault(&mut self, ctx: &mut RunContext, fault: FaultRecord) {
        self.faults.push(fault);
        for &p in &self.pages {
            if p != fault.page && !ctx.has_trap(p) {
                ctx.arm_now(p);
            }
        }
    }
}

/// A single trap on `page` live for `[from, until)`.
pub(crate) struct PresenceTrap {
    pub page: PageId,
    pub from: Tick,
    pub until: Tick,
    pub fired: bool,
}

impl Adversary for PresenceTrap {
    fn on_start(&mut self, ctx: &mut RunContext) -> Result<(), Error> {
        ctx.schedule_page_trap(self.page, self.from, None)?;
        ctx.disarm_at(self.page, self.until);
        Ok(())
    }

    fn on_fault(&mut self, _ctx: &mut RunContext, _fault: FaultRecord) {
        self.fired = true;
    }

    fn on_aex(&mut self, ctx: &mut RunContext, _tick: Tick, cost: Tick) {
        ctx.defer_pending(cost);
    }
}
