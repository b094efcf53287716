//! Foundational value types: secrets, the virtual clock, the per-segment
//! timing model and per-run performance metrics.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::Error;

/// Virtual CPU clock ticks.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Tick(pub u64);

impl Tick {
    pub const ZERO: Tick = Tick(0);

    pub fn saturating_sub(self, rhs: Tick) -> Tick {
        Tick(self.0.saturating_sub(rhs.0))
    }

    /// Shift by a signed offset, clamping at zero.
    pub fn offset(self, delta: i64) -> Tick {
        Tick(self.0.saturating_add_signed(delta))
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64
    }
}

impl Add for Tick {
    type Output = Tick;
    fn add(self, rhs: Tick) -> Tick {
        Tick(self.0 + rhs.0)
    }
}

impl AddAssign for Tick {
    fn add_assign(&mut self, rhs: Tick) {
        self.0 += rhs.0;
    }
}

impl Sub for Tick {
    type Output = Tick;
    fn sub(self, rhs: Tick) -> Tick {
        Tick(self.0 - rhs.0)
    }
}

impl fmt::Display for Tick {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Default virtual clock rate, ticks per second.
pub const DEFAULT_TICK_RATE: f64 = 3.3e9;

/// An ordered, non-empty sequence of secret bits `s_1 .. s_n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitString {
    bits: Vec<u8>,
}

impl BitString {
    pub fn new(bits: Vec<u8>) -> Result<Self, Error> {
        if bits.is_empty() {
            return Err(Error::InvalidSecret("bit string must hold at least one bit".into()));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidSecret(format!("{b} is not a bit")));
        }
        Ok(Self { bits })
    }

    pub fn from_bools(bits: impl IntoIterator<Item = bool>) -> Result<Self, Error> {
        Self::new(bits.into_iter().map(u8::from).collect())
    }

    /// Uniformly random secret of length `n`.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self, Error> {
        Self::new((0..n).map(|_| rng.random_range(0..=1u8)).collect())
    }

    /// Parse the first `n` bits of a hex string, most-significant first.
    pub fn from_hex(text: &str, n: usize) -> Result<Self, Error> {
        let text = text.trim();
        let text = text
            .strip_prefix("0x")
            .or_else(|| text.strip_prefix("0X"))
            .unwrap_or(text);
        let mut bits = Vec::with_capacity(text.len() * 4);
        for c in text.chars() {
            let nibble = c
                .to_digit(16)
                .ok_or_else(|| Error::InvalidSecret(format!("malformed hex digit {c:?}")))?;
            bits.extend((0..4).rev().map(|k| ((nibble >> k) & 1) as u8));
        }
        if n > bits.len() {
            return Err(Error::InvalidSecret(format!(
                "requested {n} bits but the hex string holds only {}",
                bits.len()
            )));
        }
        bits.truncate(n);
        Self::new(bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> u8 {
        self.bits[i]
    }

    pub fn hamming_weight(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn to_hex(&self) -> String {
        self.bits
            .chunks(4)
            .map(|c| {
                let v = c.iter().enumerate().fold(0u32, |acc, (k, &b)| acc | ((b as u32) << (3 - k)));
                char::from_digit(v, 16).unwrap()
            })
            .collect()
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Timing constants for one loop iteration ("segment") of a victim.
///
/// A 0-segment takes `c_base` ticks, a 1-segment `c_base + c_branch`, and the
/// first 1-segment of a run additionally pays `c_miss` for cold callee code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentTimingModel {
    pub c_base: Tick,
    pub c_branch: Tick,
    pub c_miss: Tick,
    pub sigma0: f64,
    pub sigma1: f64,
    /// How far before `T_i` a stop trap is armed.
    pub stop_margin: Tick,
    /// Runtime of the segment-entry callee.
    pub callee_runtime: Tick,
}

impl SegmentTimingModel {
    pub fn validate(&self) -> Result<(), Error> {
        if self.c_base.0 == 0 {
            return Err(Error::InvalidModel("c_base must be positive".into()));
        }
        if !(self.sigma0 >= 0.0 && self.sigma1 >= 0.0) {
            return Err(Error::InvalidModel("noise deviations must be non-negative".into()));
        }
        if self.stop_margin >= self.c_base {
            return Err(Error::InvalidModel(format!(
                "stop margin {} must be below c_base {}",
                self.stop_margin, self.c_base
            )));
        }
        Ok(())
    }

    /// Duration of a 0-segment.
    pub fn c0(&self) -> Tick {
        self.c_base
    }

    /// Duration of a warm 1-segment.
    pub fn c1(&self) -> Tick {
        self.c_base + self.c_branch
    }

    /// Noise-free duration of one segment.
    pub fn expected_duration(&self, bit: u8, first_one: bool) -> Tick {
        let mut t = self.c_base;
        if bit == 1 {
            t += self.c_branch;
            if first_one {
                t += self.c_miss;
            }
        }
        t
    }

    pub fn sigma(&self, bit: u8) -> f64 {
        if bit == 1 {
            self.sigma1
        } else {
            self.sigma0
        }
    }

    /// Closed-form start tick `T_i` of the segment following `prefix`.
    pub fn cumulative_start_time(&self, prefix: &[u8]) -> Tick {
        let ones = prefix.iter().filter(|&&b| b == 1).count() as u64;
        let miss = if ones > 0 { self.c_miss.0 } else { 0 };
        Tick(prefix.len() as u64 * self.c_base.0 + ones * self.c_branch.0 + miss)
    }

    /// Noise-free total duration of a run over `secret`.
    pub fn total_duration(&self, secret: &[u8]) -> Tick {
        self.cumulative_start_time(secret)
    }

    /// Draw one segment duration from the truncated, rounded Gaussian.
    pub fn segment_duration<R: Rng + ?Sized>(&self, bit: u8, first_one: bool, rng: &mut R) -> Tick {
        let mean = self.expected_duration(bit, first_one).as_f64();
        let sigma = self.sigma(bit);
        let draw = if sigma > 0.0 {
            Normal::new(mean, sigma).expect("finite sigma").sample(rng)
        } else {
            mean
        };
        Tick(draw.round().max(1.0) as u64)
    }
}

/// Per-run performance metrics as seen by a zero-overhead monitor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub aex_count: u64,
    pub l3_misses: u64,
    /// Milliseconds.
    pub wall_time: f64,
}

impl RunMetrics {
    pub fn wall_time_from_ticks(ticks: Tick, tick_rate: f64) -> f64 {
        ticks.as_f64() / tick_rate * 1e3
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn powm_like() -> SegmentTimingModel {
        SegmentTimingModel {
            c_base: Tick(46_400),
            c_branch: Tick(46_500),
            c_miss: Tick(0),
            sigma0: 493.6,
            sigma1: 122.2,
            stop_margin: Tick(5_000),
            callee_runtime: Tick(20_880),
        }
    }

    #[test]
    fn hex_parsing() {
        assert_eq!(BitString::from_hex("F", 4).unwrap().bits(), &[1, 1, 1, 1]);
        assert_eq!(BitString::from_hex("0", 4).unwrap().bits(), &[0, 0, 0, 0]);
        assert_eq!(BitString::from_hex("B", 4).unwrap().bits(), &[1, 0, 1, 1]);
        assert_eq!(BitString::from_hex("0xB4", 6).unwrap().bits(), &[1, 0, 1, 1, 0, 1]);
        assert!(BitString::from_hex("G", 4).is_err());
        assert!(BitString::from_hex("F", 5).is_err());
        assert!(BitString::from_hex("F", 0).is_err());
    }

    #[test]
    fn hex_round_trip() {
        let s = BitString::from_hex("deadbeef", 32).unwrap();
        assert_eq!(s.to_hex(), "deadbeef");
    }

    #[test]
    fn start_time_examples() {
        let m = powm_like();
        assert_eq!(m.cumulative_start_time(&[]), Tick(0));
        // 4 * 46400 + 3 * 46500, evaluated by hand.
        assert_eq!(m.cumulative_start_time(&[1, 0, 1, 1]), Tick(325_100));
        let with_miss = SegmentTimingModel { c_miss: Tick(2_000), ..m };
        assert_eq!(with_miss.cumulative_start_time(&[0, 0]), Tick(2 * 46_400));
        assert_eq!(with_miss.cumulative_start_time(&[0, 1, 1]), Tick(3 * 46_400 + 2 * 46_500 + 2_000));
    }

    #[test]
    fn zero_noise_duration_is_exact() {
        let m = SegmentTimingModel { sigma0: 0.0, sigma1: 0.0, c_miss: Tick(700), ..powm_like() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(m.segment_duration(0, false, &mut rng), Tick(46_400));
        assert_eq!(m.segment_duration(1, false, &mut rng), Tick(92_900));
        assert_eq!(m.segment_duration(1, true, &mut rng), Tick(93_600));
        assert_eq!(m.segment_duration(0, true, &mut rng), Tick(46_400));
    }

    #[test]
    fn sampled_one_loop_mean() {
        let m = powm_like();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mean = (0..n).map(|_| m.segment_duration(1, false, &mut rng).as_f64()).sum::<f64>() / n as f64;
        let tol = 3.0 * 122.2 / (n as f64).sqrt();
        assert!((mean - 92_900.0).abs() < tol + 0.5, "mean {mean}");
    }

    #[test]
    fn validation() {
        assert!(powm_like().validate().is_ok());
        let bad = SegmentTimingModel { stop_margin: Tick(50_000), ..powm_like() };
        assert!(bad.validate().is_err());
        let bad = SegmentTimingModel { c_base: Tick(0), ..powm_like() };
        assert!(bad.validate().is_err());
    }
}
