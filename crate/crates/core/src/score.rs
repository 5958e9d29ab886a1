//! Prediction matching, cumulative confidence sweeps, ROC AUC and ROC plot
//! points.
//!
//! A sweep at level `L` counts every prediction with confidence `>= L`, so
//! lower levels include everything above them. All ratio-valued outputs are
//! generic over [`Scalar`]; counts stay integral.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

/// Confidence levels in sweep order.
pub const LEVELS: [u8; 5] = [5, 4, 3, 2, 1];

/// Confidence assigned to predictions from runs that do not elicit one.
pub const PSEUDO_CONFIDENCE: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Prediction {
    pub sent_id: String,
    pub event_type: String,
    pub token_index: usize,
    pub confidence: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Reference {
    pub sent_id: String,
    pub event_type: String,
    pub first_token: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPrediction {
    pub sent_id: String,
    pub event_type: String,
    pub token_index: usize,
    pub confidence: u8,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchOutcome {
    pub labeled: Vec<LabeledPrediction>,
    /// Distinct reference phrases in scope.
    pub total_refs: usize,
    /// `(level, fn)` in [`LEVELS`] order.
    pub fn_by_level: Vec<(u8, usize)>,
}

/// Labels each prediction correct iff a reference of the same type in the
/// same sentence starts at the predicted token.
pub fn match_predictions(
    preds: &[Prediction],
    refs: &[Reference],
    known_sent_ids: &BTreeSet<String>,
) -> Result<MatchOutcome> {
    let refs: HashSet<(&str, &str, usize)> = refs
        .iter()
        .map(|r| (r.sent_id.as_str(), r.event_type.as_str(), r.first_token))
        .collect();
    let mut seen = HashSet::new();
    let mut labeled = Vec::with_capacity(preds.len());
    for p in preds {
        if !known_sent_ids.contains(&p.sent_id) {
            return Err(Error::Scoring(format!("prediction for unknown sentence {:?}", p.sent_id)));
        }
        if !(1..=5).contains(&p.confidence) {
            return Err(Error::Scoring(format!("confidence {} outside 1..=5", p.confidence)));
        }
        let key = (p.sent_id.as_str(), p.event_type.as_str(), p.token_index);
        if !seen.insert(key) {
            return Err(Error::Scoring(format!(
                "duplicate prediction {} / {} / token {}",
                p.sent_id, p.event_type, p.token_index
            )));
        }
        labeled.push(LabeledPrediction {
            sent_id: p.sent_id.clone(),
            event_type: p.event_type.clone(),
            token_index: p.token_index,
            confidence: p.confidence,
            correct: refs.contains(&key),
        });
    }
    let total_refs = refs.len();
    let fn_by_level = LEVELS
        .iter()
        .map(|&level| {
            let tp = labeled.iter().filter(|l| l.correct && l.confidence >= level).count();
            (level, total_refs - tp)
        })
        .collect();
    Ok(MatchOutcome {
        labeled,
        total_refs,
        fn_by_level,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow<T> {
    pub level: u8,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: T,
    pub recall: T,
    pub f1: T,
}

impl<T: Scalar> SweepRow<T> {
    pub fn from_counts(level: u8, tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = T::ratio_or_zero(tp as u64, (tp + fp) as u64);
        let recall = T::ratio_or_zero(tp as u64, (tp + fn_) as u64);
        SweepRow {
            level,
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: scalar::f1(precision, recall),
        }
    }
}

/// One row per level in [`LEVELS`] order.
pub fn sweep_metrics<T: Scalar>(labeled: &[LabeledPrediction], total_refs: usize) -> Vec<SweepRow<T>> {
    let mut at = [(0usize, 0usize); 6];
    for l in labeled {
        let slot = &mut at[l.confidence.min(5) as usize];
        if l.correct {
            slot.0 += 1;
        } else {
            slot.1 += 1;
        }
    }
    let (mut tp, mut fp) = (0, 0);
    LEVELS
        .iter()
        .map(|&level| {
            tp += at[level as usize].0;
            fp += at[level as usize].1;
            debug_assert!(tp <= total_refs, "more true positives than references");
            SweepRow::from_counts(level, tp, fp, total_refs.saturating_sub(tp))
        })
        .collect()
}

/// Mann-Whitney AUC of `positives` over `negatives`: the share of pairs the
/// positive wins, ties counting half. `None` when either side is empty.
pub fn mann_whitney_auc<S: Ord, T: Scalar>(positives: &[S], negatives: &[S]) -> Option<T> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut sorted: Vec<&S> = negatives.iter().collect();
    sorted.sort();
    // numerator in half-pair units
    let mut half_wins: u128 = 0;
    for p in positives {
        let below = sorted.partition_point(|n| *n < p);
        let not_above = sorted.partition_point(|n| *n <= p);
        half_wins += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = 2 * positives.len() as u128 * negatives.len() as u128;
    let gcd = gcd(half_wins, pairs);
    let (num, den) = (half_wins / gcd, pairs / gcd);
    Some(T::from_count(num as u64) / T::from_count(den as u64))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// ROC AUC over positive outputs: correct predictions against incorrect ones.
pub fn roc_auc<T: Scalar>(labeled: &[LabeledPrediction]) -> Result<T> {
    let (correct, incorrect): (Vec<u8>, Vec<u8>) = {
        let mut c = Vec::new();
        let mut i = Vec::new();
        for l in labeled {
            if l.correct {
                c.push(l.confidence);
            } else {
                i.push(l.confidence);
            }
        }
        (c, i)
    };
    mann_whitney_auc(&correct, &incorrect).ok_or(Error::DegenerateAuc {
        correct: correct.len(),
        incorrect: incorrect.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint<T> {
    pub level: u8,
    pub tp_rate: T,
    pub fp_rate: T,
    /// Predictions whose confidence equals `level` exactly.
    pub count: usize,
}

/// Cumulative ROC points, one per level that holds at least one prediction.
/// Returns a notice instead of points when either class is empty.
pub fn roc_points<T: Scalar>(
    rows: &[SweepRow<T>],
    labeled: &[LabeledPrediction],
) -> std::result::Result<Vec<RocPoint<T>>, String> {
    let total_correct = labeled.iter().filter(|l| l.correct).count();
    let total_incorrect = labeled.len() - total_correct;
    if total_correct == 0 || total_incorrect == 0 {
        return Err(format!(
            "ROC points omitted: {total_correct} correct and {total_incorrect} incorrect predictions"
        ));
    }
    Ok(rows
        .iter()
        .filter_map(|row| {
            let count = labeled.iter().filter(|l| l.confidence == row.level).count();
            (count > 0).then(|| RocPoint {
                level: row.level,
                tp_rate: T::ratio_or_zero(row.tp as u64, total_correct as u64),
                fp_rate: T::ratio_or_zero(row.fp as u64, total_incorrect as u64),
                count,
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    MacroF1,
    MicroF1,
}

/// Sweep of one event type plus what the macro average needs to know.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScore<T> {
    pub rows: Vec<SweepRow<T>>,
    pub total_refs: usize,
    pub predictions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelValue<T> {
    pub level: u8,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicAggregate<T> {
    pub micro: Vec<SweepRow<T>>,
    pub macro_f1: Vec<LevelValue<T>>,
    pub best_level: u8,
    /// Event types that entered the macro average.
    pub macro_types: Vec<String>,
}

/// Pools counts across event types (micro) and averages per-type F1 (macro,
/// skipping types with neither references nor predictions). The best level
/// maximizes the selection metric, preferring the higher level on ties.
pub fn aggregate_topic<T: Scalar>(per_type: &BTreeMap<String, TypeScore<T>>, selection: SelectionMetric) -> TopicAggregate<T> {
    let micro: Vec<SweepRow<T>> = LEVELS
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let (tp, fp, fn_) = per_type.values().fold((0, 0, 0), |acc, s| {
                let r = &s.rows[i];
                (acc.0 + r.tp, acc.1 + r.fp, acc.2 + r.fn_)
            });
            SweepRow::from_counts(level, tp, fp, fn_)
        })
        .collect();
    let included: Vec<(&String, &TypeScore<T>)> = per_type
        .iter()
        .filter(|(_, s)| s.total_refs > 0 || s.predictions > 0)
        .collect();
    let macro_f1: Vec<LevelValue<T>> = LEVELS
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let value = if included.is_empty() {
                T::zero()
            } else {
                let sum = included.iter().fold(T::zero(), |acc, (_, s)| acc + s.rows[i].f1);
                sum / T::from_count(included.len() as u64)
            };
            LevelValue { level, value }
        })
        .collect();
    let metric = |i: usize| match selection {
        SelectionMetric::MacroF1 => macro_f1[i].value,
        SelectionMetric::MicroF1 => micro[i].f1,
    };
    // LEVELS is descending, so a strict improvement keeps the higher level on ties
    let mut best = 0;
    for i in 1..LEVELS.len() {
        if metric(i) > metric(best) {
            best = i;
        }
    }
    TopicAggregate {
        micro,
        macro_f1,
        best_level: LEVELS[best],
        macro_types: included.into_iter().map(|(k, _)| k.clone()).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucStatus {
    Ok,
    /// Every prediction carries the same pseudo-confidence.
    ConstantConfidence,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucSummary<T> {
    pub value: Option<T>,
    pub status: AucStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestSummary<T> {
    pub level: u8,
    /// Micro precision at the best level.
    pub precision: T,
    /// Micro recall at the best level.
    pub recall: T,
    /// Macro F1 at the best level.
    pub f1: T,
    pub micro_f1: T,
}

/// Full score of one topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicScore<T> {
    pub topic: String,
    pub event_types: Vec<String>,
    pub per_type: BTreeMap<String, Vec<SweepRow<T>>>,
    pub topic_micro: Vec<SweepRow<T>>,
    pub topic_macro_f1: Vec<LevelValue<T>>,
    pub best_level: u8,
    pub best: BestSummary<T>,
    pub auc: AucSummary<T>,
    pub roc_points: Vec<RocPoint<T>>,
    pub total_refs: usize,
    pub total_predictions: usize,
    pub notices: Vec<String>,
}

/// Scores one topic from its per-type match outcomes.
pub fn score_topic<T: Scalar>(
    topic: &str,
    outcomes: &BTreeMap<String, MatchOutcome>,
    confidence_elicited: bool,
    selection: SelectionMetric,
) -> TopicScore<T> {
    let per_type_scores: BTreeMap<String, TypeScore<T>> = outcomes
        .iter()
        .map(|(ty, o)| {
            (
                ty.clone(),
                TypeScore {
                    rows: sweep_metrics(&o.labeled, o.total_refs),
                    total_refs: o.total_refs,
                    predictions: o.labeled.len(),
                },
            )
        })
        .collect();
    let agg = aggregate_topic(&per_type_scores, selection);
    let labeled: Vec<LabeledPrediction> = outcomes.values().flat_map(|o| o.labeled.iter().cloned()).collect();
    let mut notices = Vec::new();

    let auc = if !confidence_elicited {
        AucSummary {
            value: Some(T::half()),
            status: AucStatus::ConstantConfidence,
        }
    } else {
        match roc_auc::<T>(&labeled) {
            Ok(v) => AucSummary {
                value: Some(v),
                status: AucStatus::Ok,
            },
            Err(e) => {
                notices.push(format!("AUC not applicable: {e}"));
                AucSummary {
                    value: None,
                    status: AucStatus::NotApplicable,
                }
            }
        }
    };
    let roc_points = roc_points(&agg.micro, &labeled).unwrap_or_else(|notice| {
        notices.push(notice);
        Vec::new()
    });
    let best_index = LEVELS.iter().position(|l| *l == agg.best_level).expect("best level is a level");
    let best_row = agg.micro[best_index];
    TopicScore {
        topic: topic.to_string(),
        event_types: outcomes.keys().cloned().collect(),
        per_type: per_type_scores.into_iter().map(|(k, v)| (k, v.rows)).collect(),
        best: BestSummary {
            level: agg.best_level,
            precision: best_row.precision,
            recall: best_row.recall,
            f1: agg.macro_f1[best_index].value,
            micro_f1: best_row.f1,
        },
        topic_micro: agg.micro,
        topic_macro_f1: agg.macro_f1,
        best_level: agg.best_level,
        auc,
        roc_points,
        total_refs: outcomes.values().map(|o| o.total_refs).sum(),
        total_predictions: labeled.len(),
        notices,
    }
}
