use proptest::prelude::*;
use spreadsim::attacker::{attack_segment_page_cache, attack_window_cache_only};
use spreadsim::channels::Guess;
use spreadsim::harness::PresetLibrary;
use spreadsim::victim::{EnvironmentProfile, Instrumentation, VictimModel};
use spreadsim::{SegmentTimingModel, Tick};

fn model(c_miss: u64) -> SegmentTimingModel {
    SegmentTimingModel {
        c_base: Tick(15_400),
        c_branch: Tick(23_800),
        c_miss: Tick(c_miss),
        sigma0: 0.0,
        sigma1: 0.0,
        stop_margin: Tick(5_000),
        callee_runtime: Tick(6_930),
    }
}

fn bits(n: usize, x: u32) -> Vec<u8> {
    (0..n).map(|j| ((x >> j) & 1) as u8).collect()
}

#[test]
fn incremental_start_times_match_closed_form_exhaustively() {
    let m = model(3_000);
    let n = 16;
    for x in 0..1u32 << n {
        let s = bits(n, x);
        let mut t = Tick::ZERO;
        let mut seen_one = false;
        for i in 0..=n {
            assert_eq!(t, m.cumulative_start_time(&s[..i]), "secret {x:#06x}, i = {i}");
            if i < n {
                t += m.expected_duration(s[i], s[i] == 1 && !seen_one);
                seen_one |= s[i] == 1;
            }
        }
    }
}

fn noise_free(preset: &str, n: usize) -> (VictimModel, EnvironmentProfile) {
    let lib = PresetLibrary::builtin();
    let v = lib.get(preset).unwrap().victim(Instrumentation::None).unwrap();
    (v.noise_free().with_segments(n), EnvironmentProfile::zero_noise(Instrumentation::None, 0))
}

proptest! {
    #[test]
    fn start_times_increase(s in prop::collection::vec(0u8..=1, 1..64), c_miss in 0u64..10_000) {
        let m = model(c_miss);
        for i in 0..s.len() {
            prop_assert!(m.cumulative_start_time(&s[..i]) < m.cumulative_start_time(&s[..=i]));
        }
    }

    /// Flipping one prefix bit moves T_i by exactly one c_branch, as long as
    /// the flip does not change whether the prefix holds a 1.
    #[test]
    fn prefix_error_shifts_by_c_branch(s in prop::collection::vec(0u8..=1, 2..64), j in any::<prop::sample::Index>()) {
        let m = model(3_000);
        let j = j.index(s.len());
        let mut flipped = s.clone();
        flipped[j] ^= 1;
        prop_assume!(s.iter().any(|&b| b == 1) && flipped.iter().any(|&b| b == 1));
        let (a, b) = (m.cumulative_start_time(&s).0 as i64, m.cumulative_start_time(&flipped).0 as i64);
        let expect = if s[j] == 0 { m.c_branch.0 as i64 } else { -(m.c_branch.0 as i64) };
        prop_assert_eq!(b - a, expect);
    }

    #[test]
    fn page_cache_probe_exact_without_noise(s in prop::collection::vec(0u8..=1, 24), i in 1usize..=24, ec in any::<bool>()) {
        let (v, env) = noise_free(if ec { "ec" } else { "powm" }, 24);
        let got = attack_segment_page_cache(&v, &env, &s, i, &v.timing, &s[..i - 1]).unwrap();
        prop_assert_eq!(got.guess, Guess::from_bit(s[i - 1]));
    }

    #[test]
    fn cache_only_window_exact_without_noise(
        s in prop::collection::vec(0u8..=1, 24),
        w in 1usize..=9,
        i in 9usize..=24,
        ec in any::<bool>(),
    ) {
        let (v, env) = noise_free(if ec { "ec" } else { "powm" }, 24);
        let (g, _) = attack_window_cache_only(&v, &env, &s, i, w, &v.timing, &s[..i - w]).unwrap();
        let want: Vec<Guess> = s[i - w..i].iter().map(|&b| Guess::from_bit(b)).collect();
        prop_assert_eq!(g.first, i + 1 - w);
        prop_assert_eq!(g.guesses, want);
    }
}
