//! Attacks on the decision-tree victim, whose segments carry a label.

use std::collections::BTreeSet;

use rayon::prelude::*;

use super::probes::PresenceTrap;
use super::{run_index, standard_attack, AttackConfig, RecoveryReport, RunRecord, Strategy};
use crate::timing::{SegmentTimingModel, Tick};
use crate::victim::{discriminating_pages, execute_run, label_classes, EnvironmentProfile, PageId, VictimModel};
use crate::Error;

/// Label classes (labels with identical page scripts) with the set of pages
/// each class touches.
fn class_pages(victim: &VictimModel) -> Vec<(Vec<u8>, BTreeSet<PageId>)> {
    label_classes(&victim.signatures())
        .into_iter()
        .map(|class| {
            let pages = victim.script(class[0]).iter().copied().collect();
            (class, pages)
        })
        .collect()
}

/// Pages worth one trap each: discriminating pages, minus the anchor, whose
/// mere presence differs between label classes.
pub fn presence_pages(victim: &VictimModel) -> Result<Vec<PageId>, Error> {
    let classes = class_pages(victim);
    let reps: Vec<_> = victim
        .signatures()
        .into_iter()
        .filter(|s| classes.iter().any(|(c, _)| c[0] == s.label))
        .collect();
    let keep = discriminating_pages(&reps)?;
    Ok(keep
        .into_iter()
        .filter(|&p| p != victim.entry_page())
        .filter(|p| {
            let present = classes.iter().filter(|(_, set)| set.contains(p)).count();
            present > 0 && present < classes.len()
        })
        .collect())
}

/// One run with a single trap on `page`, live for one segment length around
/// the node-page accesses of segment `i`.
pub fn attack_label_presence(
    victim: &VictimModel,
    env: &EnvironmentProfile,
    secret: &[u8],
    i: usize,
    page: PageId,
    model: &SegmentTimingModel,
) -> Result<(bool, RunRecord), Error> {
    let t_i = Tick((i as u64 - 1) * model.c_base.0);
    // Half a callee runtime in: past the previous label's leaf and epilogue,
    // well before the next label's node pages.
    let from = t_i + Tick(model.callee_runtime.0 / 2);
    let mut adv = PresenceTrap {
        page,
        from,
        until: from + model.c_base,
        fired: false,
    };
    let out = execute_run(victim, secret, env, &mut adv)?;
    Ok((adv.fired, RunRecord::from_output(env.seed, i, &out)))
}

pub(super) fn recover_labels(
    victim: &VictimModel,
    env: &EnvironmentProfile,
    secret: &[u8],
    config: &AttackConfig,
    model: &SegmentTimingModel,
) -> Result<RecoveryReport, Error> {
    match config.strategy {
        Strategy::PageFault => {}
        Strategy::StandardPage => return standard_attack(victim, env, secret, config.strategy, config.samples, model),
        other => return Err(Error::Attack(format!("{other} does not apply to a label-valued victim"))),
    }
    let pages = presence_pages(victim)?;
    let classes = class_pages(victim);
    let k = config.samples;
    let mut runs = Vec::with_capacity(secret.len() * pages.len() * k);
    let mut decisions = Vec::with_capacity(secret.len());
    for i in 1..=secret.len() {
        let results: Vec<(bool, RunRecord)> = (0..pages.len() * k)
            .into_par_iter()
            .map(|j| attack_label_presence(victim, &env.for_run(run_index(i, j)), secret, i, pages[j / k], model))
            .collect::<Result<_, Error>>()?;
        let observed: Vec<bool> = (0..pages.len())
            .map(|p| 2 * results[p * k..(p + 1) * k].iter().filter(|(f, _)| *f).count() > k)
            .collect();
        let (best, distance) = classes
            .iter()
            .map(|(labels, set)| {
                let d = pages.iter().zip(&observed).filter(|(p, &o)| set.contains(p) != o).count();
                (labels[0], d)
            })
            .min_by_key(|&(_, d)| d)
            .expect("at least one class");
        let conf = if pages.is_empty() { 0.0 } else { 1.0 - distance as f64 / pages.len() as f64 };
        decisions.push((Some(best), conf));
        runs.extend(results.into_iter().map(|(_, r)| r));
    }
    Ok(RecoveryReport::finish(config, secret, decisions, runs, false))
}
