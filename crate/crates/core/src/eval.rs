//! Harrell's concordance index and risk scores derived from predictive
//! mixtures.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predict::{mixture_mean, mixture_median, mixture_survival, PredictError, PredictiveMixture};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("times, events and scores must have equal lengths ({times}, {events}, {scores})")]
    Length { times: usize, events: usize, scores: usize },
    #[error("need at least two subjects")]
    TooFew,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

/// Concordance over usable pairs. `value` is `None` when no pair is usable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CIndexResult {
    pub value: Option<f64>,
    pub usable: u64,
    pub concordant: u64,
    pub tied: u64,
}

impl CIndexResult {
    fn from_counts(usable: u64, concordant: u64, tied: u64) -> Self {
        let value = (usable > 0).then(|| (concordant as f64 + 0.5 * tied as f64) / usable as f64);
        Self {
            value,
            usable,
            concordant,
            tied,
        }
    }
}

fn check(times: &[f64], events: &[f64], scores: &[f64]) -> Result<(), EvalError> {
    if times.len() != events.len() || times.len() != scores.len() {
        return Err(EvalError::Length {
            times: times.len(),
            events: events.len(),
            scores: scores.len(),
        });
    }
    if times.len() < 2 {
        return Err(EvalError::TooFew);
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(EvalError::NonFinite("time"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite("risk score"));
    }
    Ok(())
}

/// Fenwick tree over score ranks holding subject counts.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted subjects with rank `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut total = 0;
        while i > 0 {
            total += self.0[i];
            i -= i & i.wrapping_neg();
        }
        total
    }
}

/// Harrell's c-index with higher scores predicting shorter survival.
///
/// A pair is usable when the shorter time is an event and the times differ.
/// It is concordant when the earlier failure has the higher score; equal
/// scores count one half. Runs in `O(n log n)`.
pub fn c_index(times: &[f64], events: &[f64], scores: &[f64]) -> Result<CIndexResult, EvalError> {
    check(times, events, scores)?;
    let n = times.len();
    let mut sorted_scores = scores.to_vec();
    sorted_scores.sort_by(f64::total_cmp);
    sorted_scores.dedup();
    let rank = |s: f64| sorted_scores.partition_point(|&v| v < s);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut tree = Fenwick(vec![0; sorted_scores.len() + 1]);
    let mut inserted = 0u64;
    let (mut usable, mut concordant, mut tied) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let mut end = i;
        while end < n && times[order[end]] == t {
            end += 1;
        }
        for &j in &order[i..end] {
            if events[j] == 1.0 {
                let r = rank(scores[j]);
                let below = tree.below(r);
                let at_or_below = tree.below(r + 1);
                usable += inserted;
                concordant += below;
                tied += at_or_below - below;
            }
        }
        for &j in &order[i..end] {
            tree.add(rank(scores[j]));
            inserted += 1;
        }
        i = end;
    }
    Ok(CIndexResult::from_counts(usable, concordant, tied))
}

/// Direct `O(n²)` pair enumeration with the same rules as [`c_index`].
pub fn c_index_pairwise(times: &[f64], events: &[f64], scores: &[f64]) -> Result<CIndexResult, EvalError> {
    check(times, events, scores)?;
    let (mut usable, mut concordant, mut tied) = (0u64, 0u64, 0u64);
    for i in 0..times.len() {
        if events[i] != 1.0 {
            continue;
        }
        for j in 0..times.len() {
            if times[i] < times[j] {
                usable += 1;
                if scores[i] > scores[j] {
                    concordant += 1;
                } else if scores[i] == scores[j] {
                    tied += 1;
                }
            }
        }
    }
    Ok(CIndexResult::from_counts(usable, concordant, tied))
}

/// How a predictive mixture is turned into a risk score (higher = worse).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RiskScore {
    /// Negative predictive mean survival time.
    #[default]
    NegMean,
    /// Negative predictive median survival time.
    NegMedian,
    /// Predicted probability of failure by the horizon.
    FailureProb { horizon: f64 },
}

pub fn mixture_risk(mix: &PredictiveMixture, score: RiskScore) -> Result<f64, PredictError> {
    Ok(match score {
        RiskScore::NegMean => -mixture_mean(mix),
        RiskScore::NegMedian => -mixture_median(mix),
        RiskScore::FailureProb { horizon } => 1.0 - mixture_survival(mix, horizon)?,
    })
}
