//! Threshold detectors over per-run metrics and their recall/specificity.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::timing::RunMetrics;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DetectorFamily {
    /// The transactional tool's per-run exit counter.
    TsgxAex,
    IdealAex,
    IdealCacheMiss,
    /// Absolute wall-time threshold in milliseconds.
    IdealTime,
}

impl DetectorFamily {
    pub const ALL: [DetectorFamily; 4] =
        [DetectorFamily::TsgxAex, DetectorFamily::IdealAex, DetectorFamily::IdealCacheMiss, DetectorFamily::IdealTime];

    pub fn key(self) -> &'static str {
        match self {
            DetectorFamily::TsgxAex => "tsgx_aex",
            DetectorFamily::IdealAex => "ideal_aex",
            DetectorFamily::IdealCacheMiss => "ideal_cache_miss",
            DetectorFamily::IdealTime => "ideal_time",
        }
    }

    pub fn metric(self, m: &RunMetrics) -> f64 {
        match self {
            DetectorFamily::TsgxAex | DetectorFamily::IdealAex => m.aex_count as f64,
            DetectorFamily::IdealCacheMiss => m.l3_misses as f64,
            DetectorFamily::IdealTime => m.wall_time,
        }
    }
}

impl fmt::Display for DetectorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for DetectorFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        DetectorFamily::ALL
            .into_iter()
            .find(|f| f.key() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown detector family {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub family: DetectorFamily,
    pub threshold: f64,
}

impl DetectorConfig {
    pub fn new(family: DetectorFamily, threshold: f64) -> Result<Self, Error> {
        if !(threshold > 0.0) {
            return Err(Error::Config(format!("detector threshold must be positive, got {threshold}")));
        }
        Ok(Self { family, threshold })
    }
}

/// Inclusive threshold test: a metric that reaches the threshold alarms.
pub fn observe_run(detector: &DetectorConfig, metrics: &RunMetrics) -> bool {
    detector.family.metric(metrics) >= detector.threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub threshold: f64,
    pub recall: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub family: DetectorFamily,
    pub rows: Vec<DetectionRow>,
    pub n_attack: usize,
    pub n_benign: usize,
}

#[derive(Serialize)]
struct CsvRow {
    family: DetectorFamily,
    threshold: f64,
    recall: f64,
    specificity: f64,
    n_attack: usize,
    n_benign: usize,
}

impl DetectionReport {
    /// Largest `min(recall, specificity)` over the sweep: how well the best
    /// single threshold does on both counts at once.
    pub fn best_balanced(&self) -> f64 {
        self.rows.iter().map(|r| r.recall.min(r.specificity)).fold(0.0, f64::max)
    }

    pub fn row(&self, threshold: f64) -> Option<&DetectionRow> {
        self.rows.iter().find(|r| r.threshold == threshold)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), Error> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(CsvRow {
                family: self.family,
                threshold: r.threshold,
                recall: r.recall,
                specificity: r.specificity,
                n_attack: self.n_attack,
                n_benign: self.n_benign,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

impl Serialize for DetectorFamily {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.key())
    }
}

impl<'de> Deserialize<'de> for DetectorFamily {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn evaluate_detector(
    family: DetectorFamily,
    thresholds: &[f64],
    attack_runs: &[RunMetrics],
    benign_runs: &[RunMetrics],
) -> Result<DetectionReport, Error> {
    if attack_runs.is_empty() || benign_runs.is_empty() {
        return Err(Error::Config("detector evaluation needs attack and benign runs".into()));
    }
    let rows = thresholds
        .iter()
        .map(|&t| {
            let d = DetectorConfig { family, threshold: t };
            let flagged = attack_runs.iter().filter(|m| observe_run(&d, m)).count();
            let quiet = benign_runs.iter().filter(|m| !observe_run(&d, m)).count();
            DetectionRow {
                threshold: t,
                recall: flagged as f64 / attack_runs.len() as f64,
                specificity: quiet as f64 / benign_runs.len() as f64,
            }
        })
        .collect();
    Ok(DetectionReport { family, rows, n_attack: attack_runs.len(), n_benign: benign_runs.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn aex(n: u64) -> RunMetrics {
        RunMetrics { aex_count: n, ..RunMetrics::default() }
    }

    #[test]
    fn inclusive_boundary() {
        let d5 = DetectorConfig::new(DetectorFamily::IdealAex, 5.0).unwrap();
        let d3 = DetectorConfig::new(DetectorFamily::IdealAex, 3.0).unwrap();
        assert!(!observe_run(&d5, &aex(3)));
        assert!(observe_run(&d3, &aex(3)));
        assert!(DetectorConfig::new(DetectorFamily::IdealAex, 0.0).is_err());
    }

    #[test]
    fn separated_toy_data() {
        let attack = vec![aex(3); 4];
        let benign = vec![aex(2); 6];
        let r = evaluate_detector(DetectorFamily::IdealAex, &[3.0, 4.0], &attack, &benign).unwrap();
        assert_eq!((r.rows[0].recall, r.rows[0].specificity), (1.0, 1.0));
        assert_eq!(r.rows[1].recall, 0.0);
        assert!(evaluate_detector(DetectorFamily::IdealAex, &[1.0], &[], &benign).is_err());
    }

    #[test]
    fn csv_columns() {
        let r = evaluate_detector(DetectorFamily::IdealCacheMiss, &[1.0], &[aex(1)], &[aex(1)]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("family,threshold,recall,specificity,n_attack,n_benign\nideal_cache_miss,"));
    }

    proptest! {
        #[test]
        fn recall_and_specificity_monotone(
            attack in prop::collection::vec(0u64..40, 1..60),
            benign in prop::collection::vec(0u64..40, 1..60),
        ) {
            let a: Vec<_> = attack.into_iter().map(aex).collect();
            let b: Vec<_> = benign.into_iter().map(aex).collect();
            let ts: Vec<f64> = (1..=45).map(|t| t as f64 * 0.9).collect();
            let r = evaluate_detector(DetectorFamily::IdealAex, &ts, &a, &b).unwrap();
            for w in r.rows.windows(2) {
                prop_assert!(w[1].recall <= w[0].recall);
                prop_assert!(w[1].specificity >= w[0].specificity);
            }
            prop_assert_eq!(r.rows.last().unwrap().specificity, 1.0);
        }

        #[test]
        fn observe_is_pure(n in 0u64..100, t in 1u32..100) {
            let d = DetectorConfig::new(DetectorFamily::TsgxAex, t as f64).unwrap();
            prop_assert_eq!(observe_run(&d, &aex(n)), observe_run(&d, &aex(n)));
            prop_assert_eq!(observe_run(&d, &aex(n)), n >= t as u64);
        }
    }
}
