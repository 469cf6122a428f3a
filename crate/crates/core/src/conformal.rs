//! Split conformal calibration of multi-step prediction errors.
//!
//! Scores are the worst per-agent Euclidean error at each horizon step. One
//! half of the calibration data fixes per-step normalization weights, the
//! other half picks the radius, so coverage holds for any choice of weights.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::grid::Coord;
use crate::mapf::AgentId;
use crate::prediction::Point;

/// Lower bound on the quantile used for the default weights.
pub const QUANTILE_FLOOR: f64 = 1e-6;

/// Minimum number of records needed to fit weights.
pub const MIN_CAL1: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConformalError {
    #[error("instance {instance}: agent {agent} has no ground truth")]
    MissingAgent { instance: usize, agent: AgentId },
    #[error("instance {instance}: agent {agent} has {got} steps, expected {expected}")]
    MissingStep {
        instance: usize,
        agent: AgentId,
        expected: usize,
        got: usize,
    },
    #[error("need at least {needed} calibration records, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("record {instance} has {got} steps, expected {expected}")]
    HorizonMismatch { instance: usize, expected: usize, got: usize },
    #[error("delta must lie in (0, 1), got {0}")]
    BadDelta(f64),
    #[error("invalid normalization weights: {0}")]
    BadAlphas(String),
}

/// Euclidean prediction error.
pub fn nonconformity(pred: Point, actual: Point) -> f64 {
    pred.distance(actual)
}

/// Per-step scores of one calibration instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonconformityRecord {
    pub instance: usize,
    pub scores: Vec<f64>,
}

/// Predictions and ground truth for one instance, `horizon` steps each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub instance: usize,
    pub predictions: BTreeMap<AgentId, Vec<Point>>,
    pub actuals: BTreeMap<AgentId, Vec<Coord>>,
}

pub fn score_sample(sample: &CalibrationSample, horizon: usize) -> Result<NonconformityRecord, ConformalError> {
    let instance = sample.instance;
    let mut scores = alloc::vec![0.0f64; horizon];
    for agent in sample.actuals.keys() {
        if !sample.predictions.contains_key(agent) {
            return Err(ConformalError::MissingAgent { instance, agent: *agent });
        }
    }
    for (agent, preds) in &sample.predictions {
        let actual = sample
            .actuals
            .get(agent)
            .ok_or(ConformalError::MissingAgent { instance, agent: *agent })?;
        for got in [preds.len(), actual.len()] {
            if got < horizon {
                return Err(ConformalError::MissingStep {
                    instance,
                    agent: *agent,
                    expected: horizon,
                    got,
                });
            }
        }
        for (h, s) in scores.iter_mut().enumerate() {
            *s = s.max(nonconformity(preds[h], Point::from(actual[h])));
        }
    }
    Ok(NonconformityRecord { instance, scores })
}

pub fn score_calibration_set(
    samples: &[CalibrationSample],
    horizon: usize,
) -> Result<Vec<NonconformityRecord>, ConformalError> {
    samples.iter().map(|s| score_sample(s, horizon)).collect()
}

/// `p = ceil((n + 1)(1 - delta))`, computed with a small tolerance so that
/// products such as `20 * 0.95` land on the intended integer.
pub fn conformal_rank(n: usize, delta: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - delta);
    libm::ceil(x - 1e-9) as usize
}

/// Per-step normalization constants, strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AlphaWeights(pub Vec<f64>);

impl AlphaWeights {
    pub fn uniform(horizon: usize) -> Self {
        Self(alloc::vec![1.0; horizon])
    }

    pub fn horizon(&self) -> usize {
        self.0.len()
    }

    fn check(&self) -> Result<(), ConformalError> {
        if self.0.is_empty() {
            return Err(ConformalError::BadAlphas("empty".into()));
        }
        if let Some(a) = self.0.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(ConformalError::BadAlphas(alloc::format!("{a} is not a positive finite number")));
        }
        Ok(())
    }
}

/// Fits normalization weights on the first calibration half.
pub trait AlphaRoutine {
    fn name(&self) -> &str;
    fn alphas(&self, cal1: &[NonconformityRecord], delta: f64) -> Result<AlphaWeights, ConformalError>;
}

/// `alpha_h = 1 / q_h`, where `q_h` is the rank-`p` order statistic of the
/// step-`h` scores (clamped to the largest score and floored at
/// [`QUANTILE_FLOOR`]).
#[derive(Debug, Clone, Copy, Default)]
pub struct QuantileFallback;

impl AlphaRoutine for QuantileFallback {
    fn name(&self) -> &str {
        "quantile-fallback"
    }

    fn alphas(&self, cal1: &[NonconformityRecord], delta: f64) -> Result<AlphaWeights, ConformalError> {
        check_delta(delta)?;
        if cal1.len() < MIN_CAL1 {
            return Err(ConformalError::TooFewRecords {
                needed: MIN_CAL1,
                got: cal1.len(),
            });
        }
        let horizon = common_horizon(cal1)?;
        let n = cal1.len();
        let rank = conformal_rank(n, delta).clamp(1, n);
        let mut column = Vec::with_capacity(n);
        let alphas = (0..horizon)
            .map(|h| {
                column.clear();
                column.extend(cal1.iter().map(|r| r.scores[h]));
                column.sort_by(f64::total_cmp);
                1.0 / column[rank - 1].max(QUANTILE_FLOOR)
            })
            .collect();
        Ok(AlphaWeights(alphas))
    }
}

pub fn compute_alphas(cal1: &[NonconformityRecord], delta: f64) -> Result<AlphaWeights, ConformalError> {
    QuantileFallback.alphas(cal1, delta)
}

fn check_delta(delta: f64) -> Result<(), ConformalError> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(ConformalError::BadDelta(delta))
    }
}

fn common_horizon(records: &[NonconformityRecord]) -> Result<usize, ConformalError> {
    let expected = records.first().map_or(0, |r| r.scores.len());
    for r in records {
        if r.scores.len() != expected {
            return Err(ConformalError::HorizonMismatch {
                instance: r.instance,
                expected,
                got: r.scores.len(),
            });
        }
    }
    Ok(expected)
}

/// Calibrated radii, one per horizon step. A radius may be infinite when the
/// calibration set is too small for `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpIntervals {
    pub radii: Vec<f64>,
    pub delta: f64,
    pub cal2_size: usize,
    /// Rank of the selected normalized score (1-based, `cal2_size + 1` is
    /// the appended infinity).
    pub p: usize,
    /// The selected normalized score.
    pub threshold: f64,
}

impl CpIntervals {
    pub fn horizon(&self) -> usize {
        self.radii.len()
    }

    /// Whether every step's score is within its radius.
    pub fn covers(&self, record: &NonconformityRecord) -> bool {
        record.scores.len() == self.radii.len()
            && record.scores.iter().zip(&self.radii).all(|(s, c)| s <= c)
    }
}

pub fn calibrate(
    cal2: &[NonconformityRecord],
    alphas: &AlphaWeights,
    delta: f64,
) -> Result<CpIntervals, ConformalError> {
    check_delta(delta)?;
    alphas.check()?;
    if cal2.is_empty() {
        return Err(ConformalError::TooFewRecords { needed: 1, got: 0 });
    }
    let horizon = common_horizon(cal2)?;
    if horizon != alphas.horizon() {
        return Err(ConformalError::HorizonMismatch {
            instance: cal2[0].instance,
            expected: alphas.horizon(),
            got: horizon,
        });
    }
    let mut normalized: Vec<f64> = cal2
        .iter()
        .map(|r| {
            r.scores
                .iter()
                .zip(&alphas.0)
                .map(|(s, a)| a * s)
                .fold(0.0, f64::max)
        })
        .collect();
    normalized.sort_by(f64::total_cmp);
    normalized.push(f64::INFINITY);
    let p = conformal_rank(cal2.len(), delta).clamp(1, cal2.len() + 1);
    let threshold = normalized[p - 1];
    Ok(CpIntervals {
        radii: alphas.0.iter().map(|a| radius_for(threshold, *a)).collect(),
        delta,
        cal2_size: cal2.len(),
        p,
        threshold,
    })
}

/// `threshold / alpha`, adjusted to the largest float `c` with
/// `alpha * c <= threshold`. Scores tie often (grid distances), and a radius
/// rounded one ulp low would drop every record sitting on the threshold.
fn radius_for(threshold: f64, alpha: f64) -> f64 {
    if !threshold.is_finite() {
        return threshold;
    }
    let mut c = threshold / alpha;
    while alpha * c > threshold {
        c = c.next_down();
    }
    while alpha * c.next_up() <= threshold {
        c = c.next_up();
    }
    c
}

/// Deterministic 50/50 split by position: the first half fits weights.
pub fn split_calibration(records: &[NonconformityRecord]) -> (&[NonconformityRecord], &[NonconformityRecord]) {
    records.split_at(records.len() / 2)
}

/// Full calibration: split, fit weights with `routine`, calibrate.
pub fn conformal_setup(
    records: &[NonconformityRecord],
    delta: f64,
    routine: &dyn AlphaRoutine,
) -> Result<(AlphaWeights, CpIntervals), ConformalError> {
    let (cal1, cal2) = split_calibration(records);
    let alphas = routine.alphas(cal1, delta)?;
    let intervals = calibrate(cal2, &alphas, delta)?;
    Ok((alphas, intervals))
}

/// Fraction of records covered at every step simultaneously. An empty test
/// set is vacuously covered.
pub fn empirical_coverage(test: &[NonconformityRecord], intervals: &CpIntervals) -> f64 {
    if test.is_empty() {
        return 1.0;
    }
    let hit = test.iter().filter(|r| intervals.covers(r)).count();
    hit as f64 / test.len() as f64
}

/// Serialized calibration result. Infinite radii are written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub delta: f64,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub alphas: Vec<f64>,
    #[serde(rename = "C", with = "radii_serde")]
    pub radii: Vec<f64>,
    pub cal2_size: usize,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncontrolled: Option<usize>,
}

impl CalibrationArtifact {
    pub fn new(alphas: &AlphaWeights, intervals: &CpIntervals, method: &str) -> Self {
        Self {
            delta: intervals.delta,
            horizon: intervals.horizon(),
            alphas: alphas.0.clone(),
            radii: intervals.radii.clone(),
            cal2_size: intervals.cal2_size,
            method: method.into(),
            map: None,
            predictor: None,
            uncontrolled: None,
        }
    }
}

mod radii_serde {
    use alloc::vec::Vec;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(radii: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<Option<f64>> = radii.iter().map(|r| r.is_finite().then_some(*r)).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|r| r.unwrap_or(f64::INFINITY)).collect())
    }
}
