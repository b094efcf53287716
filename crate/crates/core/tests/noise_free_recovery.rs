//! Without timing, timer or probe noise every strategy recovers every
//! secret exactly.

use rayon::prelude::*;
use spreadsim::attacker::{recover_secret_with_model, AttackConfig, Strategy};
use spreadsim::harness::PresetLibrary;
use spreadsim::victim::{EnvironmentProfile, Instrumentation};

fn configs() -> Vec<AttackConfig> {
    vec![
        AttackConfig::new(Strategy::PageFault, 1),
        AttackConfig::new(Strategy::PageCache, 1),
        AttackConfig::cache_only(1, 1),
        AttackConfig::cache_only(4, 1),
        AttackConfig::new(Strategy::StandardPage, 1),
        AttackConfig::new(Strategy::StandardCache, 1),
    ]
}

fn exhaustive(preset: &str, n: usize) {
    let lib = PresetLibrary::builtin();
    let victim = lib.get(preset).unwrap().victim(Instrumentation::None).unwrap().noise_free().with_segments(n);
    let env = EnvironmentProfile::zero_noise(Instrumentation::None, 0);
    for config in configs() {
        let failures: Vec<u32> = (0..1u32 << n)
            .into_par_iter()
            .filter(|&x| {
                let secret: Vec<u8> = (0..n).map(|j| ((x >> j) & 1) as u8).collect();
                let r = recover_secret_with_model(&victim, &env, &secret, &config, &victim.timing).unwrap();
                r.recovered != secret || r.undecided() > 0
            })
            .collect();
        assert!(failures.is_empty(), "{preset} {config:?}: {} of {} secrets wrong, e.g. {:#x}", failures.len(), 1 << n, failures[0]);
    }
}

#[test]
fn powm_every_secret_up_to_12_bits() {
    for n in [1, 2, 3, 5, 8, 12] {
        exhaustive("powm", n);
    }
}

#[test]
fn ec_every_secret_up_to_12_bits() {
    for n in [1, 2, 3, 5, 8, 12] {
        exhaustive("ec", n);
    }
}
