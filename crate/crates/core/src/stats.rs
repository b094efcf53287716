//! Small statistics helpers: zero-truncated Gaussians fitted to reported
//! mean/standard-deviation pairs, and summary moments.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

/// A reported `mean ± sd` pair for a non-negative quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub const fn new(mean: f64, sd: f64) -> Self {
        Self { mean, sd }
    }
}

fn inverse_mills(alpha: f64) -> f64 {
    let pdf = (-0.5 * alpha * alpha).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let tail = 0.5 * erfc(alpha / std::f64::consts::SQRT_2);
    pdf / tail
}

/// sd/mean of a unit-scale normal truncated below at `alpha`, plus its mean.
fn truncated_shape(alpha: f64) -> (f64, f64) {
    let lambda = inverse_mills(alpha);
    let mean = lambda - alpha;
    let var = 1.0 + alpha * lambda - lambda * lambda;
    (var.max(0.0).sqrt() / mean, mean)
}

/// Gaussian truncated below at zero whose *truncated* moments match a target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedNormal {
    mu: f64,
    sigma: f64,
}

impl TruncatedNormal {
    const ALPHA_MIN: f64 = -30.0;
    const ALPHA_MAX: f64 = 8.0;

    /// Fit the parent normal so that the truncated distribution has the given
    /// mean and sd. Rows too narrow to feel the truncation are plain normals;
    /// rows more dispersed than any zero-truncated normal can be keep their
    /// mean and get the largest reachable sd.
    pub fn fit(target: MeanSd) -> Self {
        if target.sd <= 0.0 || target.mean <= 0.0 {
            return Self { mu: target.mean.max(0.0), sigma: target.sd.max(0.0) };
        }
        let cv = target.sd / target.mean;
        let (cv_min, _) = truncated_shape(Self::ALPHA_MIN);
        if cv <= cv_min {
            return Self { mu: target.mean, sigma: target.sd };
        }
        let (cv_max, _) = truncated_shape(Self::ALPHA_MAX);
        let alpha = if cv >= cv_max {
            Self::ALPHA_MAX
        } else {
            let (mut lo, mut hi) = (Self::ALPHA_MIN, Self::ALPHA_MAX);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if truncated_shape(mid).0 < cv {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let (_, unit_mean) = truncated_shape(alpha);
        let sigma = target.mean / unit_mean;
        Self { mu: -alpha * sigma, sigma }
    }

    pub fn constant(value: f64) -> Self {
        Self { mu: value, sigma: 0.0 }
    }

    pub fn parent_mean(&self) -> f64 {
        self.mu
    }

    pub fn parent_sd(&self) -> f64 {
        self.sigma
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma <= 0.0 {
            return self.mu.max(0.0);
        }
        let a = -self.mu / self.sigma;
        if a <= 0.0 {
            // At least half the parent's mass is kept; plain rejection.
            let normal = Normal::new(self.mu, self.sigma).expect("finite parameters");
            loop {
                let x = normal.sample(rng);
                if x >= 0.0 {
                    return x;
                }
            }
        }
        // Tail beyond `a` standard deviations: exponential proposals.
        let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
        let exp = Exp::new(lambda).expect("positive rate");
        loop {
            let z = a + exp.sample(rng);
            let u: f64 = rng.random();
            if u <= (-0.5 * (z - lambda) * (z - lambda)).exp() {
                return self.mu + self.sigma * z;
            }
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empirical(t: &TruncatedNormal, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| t.sample(&mut rng)).collect();
        (mean(&xs), std_dev(&xs))
    }

    #[test]
    fn fit_matches_moments_for_skewed_rows() {
        for target in [MeanSd::new(2.441, 1.93), MeanSd::new(14.44, 10.97), MeanSd::new(123.27, 82.91)] {
            let t = TruncatedNormal::fit(target);
            let (m, s) = empirical(&t, 200_000, 3);
            assert!((m - target.mean).abs() / target.mean < 0.01, "{target:?} -> {m}");
            assert!((s - target.sd).abs() / target.sd < 0.02, "{target:?} -> {s}");
        }
    }

    #[test]
    fn far_from_zero_is_plain_normal() {
        let t = TruncatedNormal::fit(MeanSd::new(6007.21, 510.83));
        assert!((t.parent_mean() - 6007.21).abs() < 1e-6);
        assert!((t.parent_sd() - 510.83).abs() < 1e-6);
    }

    #[test]
    fn infeasible_cv_keeps_the_mean() {
        let target = MeanSd::new(200.36, 538.88);
        let (m, s) = empirical(&TruncatedNormal::fit(target), 200_000, 1);
        assert!((m - target.mean).abs() / target.mean < 0.01, "{m}");
        assert!(s < target.sd && s > 0.8 * target.mean, "{s}");
    }

    #[test]
    fn narrow_rows_are_plain_normals() {
        let t = TruncatedNormal::fit(MeanSd::new(4.1, 0.012));
        assert_eq!((t.parent_mean(), t.parent_sd()), (4.1, 0.012));
    }

    #[test]
    fn zero_sd_is_constant() {
        let t = TruncatedNormal::fit(MeanSd::new(5.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..10).all(|_| t.sample(&mut rng) == 5.0));
    }

    #[test]
    fn moments() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert!((std_dev(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-12);
        assert_eq!(std_dev(&[1.0]), 0.0);
    }
}
