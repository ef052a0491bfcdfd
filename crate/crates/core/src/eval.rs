//! Dependency metrics over traces and benchmark scoring: object-hallucination
//! rates for captions and accuracy/F1 for binary object-presence VQA.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::StepTrace;
use crate::numerics::{self, NumericsError, ProbDistribution};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    Empty(String),
    #[error("record {0} has no ground-truth objects")]
    EmptyGroundTruth(String),
    #[error("metric unavailable: {0}")]
    MetricUnavailable(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One caption's extracted objects against its ground truth.
///
/// `mentions` is a multiset (every occurrence counts for the instance-level
/// rate); `generated_objects` is its deduplicated set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub id: String,
    pub generated_objects: BTreeSet<String>,
    pub gt_objects: BTreeSet<String>,
    pub mentions: Vec<String>,
}

impl CaptionRecord {
    pub fn new(id: impl Into<String>, mentions: Vec<String>, gt_objects: BTreeSet<String>) -> Self {
        let generated_objects = mentions.iter().cloned().collect();
        Self {
            id: id.into(),
            generated_objects,
            gt_objects,
            mentions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeAnswer {
    Yes,
    No,
}

/// One binary object-presence question with gold and predicted answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PopeItem {
    pub id: String,
    pub question_object: String,
    pub gold: PopeAnswer,
    pub predicted: PopeAnswer,
}

/// Per-step metric values with strictly increasing step indices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DependencyCurve {
    pub points: Vec<(u64, f64)>,
}

impl DependencyCurve {
    pub fn new(points: Vec<(u64, f64)>) -> Result<Self, EvalError> {
        for pair in points.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(EvalError::Empty(format!(
                    "step indices must be strictly increasing, got {} then {}",
                    pair[0].0, pair[1].0
                )));
            }
        }
        Ok(Self { points })
    }
}

/// Hellinger distance between the full-input and no-visual next-token
/// distributions.
pub fn visual_dependency(
    p_full: &ProbDistribution,
    p_no_vis: &ProbDistribution,
) -> Result<f64, EvalError> {
    Ok(numerics::hellinger(p_full, p_no_vis)?)
}

/// Hellinger distance between the full-input and pruned-text next-token
/// distributions.
pub fn visuotextual_dependency(
    p_full: &ProbDistribution,
    p_vis_txt_hal: &ProbDistribution,
) -> Result<f64, EvalError> {
    Ok(numerics::hellinger(p_full, p_vis_txt_hal)?)
}

fn curve_from_traces(
    traces: &[StepTrace],
    field: impl Fn(&StepTrace) -> Option<f64>,
    missing: &str,
) -> Result<DependencyCurve, EvalError> {
    let mut points = Vec::with_capacity(traces.len());
    for trace in traces {
        let value = field(trace).ok_or_else(|| {
            EvalError::MetricUnavailable(format!(
                "step {} lacks {missing}; the method did not run that pass",
                trace.step
            ))
        })?;
        points.push((trace.step, value));
    }
    DependencyCurve::new(points)
}

/// Per-step divergence between the two degraded distributions, as recorded
/// at generation time.
pub fn jsd_curve(traces: &[StepTrace]) -> Result<DependencyCurve, EvalError> {
    curve_from_traces(traces, |t| t.jsd_hal, "the degraded-pair divergence")
}

/// Per-step visual dependency recorded in the traces.
pub fn vd_curve(traces: &[StepTrace]) -> Result<DependencyCurve, EvalError> {
    curve_from_traces(traces, |t| t.vd, "the no-visual pass distance")
}

/// Per-step visuotextual dependency recorded in the traces.
pub fn vtd_curve(traces: &[StepTrace]) -> Result<DependencyCurve, EvalError> {
    curve_from_traces(traces, |t| t.vtd, "the pruned-text pass distance")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    /// Percent of captions containing at least one object outside the ground
    /// truth (sentence level).
    pub c_s: f64,
    /// Percent of object mentions that are hallucinated (instance level).
    pub c_i: f64,
    /// Percent of ground-truth objects mentioned in their caption.
    pub recall: f64,
}

/// Caption-level object hallucination rates.
pub fn chair_scores(records: &[CaptionRecord]) -> Result<ChairScores, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("no caption records".into()));
    }
    let mut hallucinated_captions = 0usize;
    let mut hallucinated_mentions = 0usize;
    let mut total_mentions = 0usize;
    let mut gt_total = 0usize;
    let mut gt_mentioned = 0usize;

    for record in records {
        if record.gt_objects.is_empty() {
            return Err(EvalError::EmptyGroundTruth(record.id.clone()));
        }
        if record
            .generated_objects
            .iter()
            .any(|o| !record.gt_objects.contains(o))
        {
            hallucinated_captions += 1;
        }
        total_mentions += record.mentions.len();
        hallucinated_mentions += record
            .mentions
            .iter()
            .filter(|m| !record.gt_objects.contains(*m))
            .count();
        gt_total += record.gt_objects.len();
        gt_mentioned += record
            .gt_objects
            .iter()
            .filter(|o| record.generated_objects.contains(*o))
            .count();
    }

    let c_s = 100.0 * hallucinated_captions as f64 / records.len() as f64;
    let c_i = if total_mentions == 0 {
        0.0
    } else {
        100.0 * hallucinated_mentions as f64 / total_mentions as f64
    };
    let recall = 100.0 * gt_mentioned as f64 / gt_total as f64;
    Ok(ChairScores { c_s, c_i, recall })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeScores {
    pub accuracy: f64,
    pub f1: f64,
}

/// Accuracy and F1 with "yes" as the positive class.
pub fn pope_scores(items: &[PopeItem]) -> Result<PopeScores, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Empty("no binary VQA items".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut fn_ = 0usize;
    for item in items {
        match (item.predicted, item.gold) {
            (PopeAnswer::Yes, PopeAnswer::Yes) => tp += 1,
            (PopeAnswer::Yes, PopeAnswer::No) => fp += 1,
            (PopeAnswer::No, PopeAnswer::No) => tn += 1,
            (PopeAnswer::No, PopeAnswer::Yes) => fn_ += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / items.len() as f64;
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PopeScores { accuracy, f1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::TokenId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn mentions(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn trace_with(step: u64, vd: Option<f64>, vtd: Option<f64>, jsd: Option<f64>) -> StepTrace {
        StepTrace {
            step,
            chosen: TokenId(2),
            alpha2: None,
            eta: None,
            kept_text_positions: None,
            pruned_text_tokens: None,
            kept_visual_positions: None,
            top_orig: vec![(2, 1.0)],
            top_vis_hal: None,
            top_vis_txt_hal: None,
            vd,
            vtd,
            jsd_hal: jsd,
        }
    }

    #[test]
    fn dependency_identity_and_disjoint() {
        let p = ProbDistribution::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(visual_dependency(&p, &p).unwrap(), 0.0);
        let a = ProbDistribution::new(vec![1.0, 0.0]).unwrap();
        let b = ProbDistribution::new(vec![0.0, 1.0]).unwrap();
        assert!((visual_dependency(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!((visuotextual_dependency(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jsd_curve_reads_recorded_values() {
        let traces = vec![
            trace_with(1, Some(0.2), Some(0.3), Some(0.01)),
            trace_with(2, Some(0.1), Some(0.3), Some(0.02)),
        ];
        let curve = jsd_curve(&traces).unwrap();
        assert_eq!(curve.points, vec![(1, 0.01), (2, 0.02)]);
        let vd = vd_curve(&traces).unwrap();
        assert_eq!(vd.points, vec![(1, 0.2), (2, 0.1)]);
    }

    #[test]
    fn jsd_curve_missing_pass_is_an_error() {
        let traces = vec![trace_with(1, Some(0.2), None, None)];
        assert!(matches!(
            jsd_curve(&traces),
            Err(EvalError::MetricUnavailable(_))
        ));
        assert!(matches!(
            vtd_curve(&traces),
            Err(EvalError::MetricUnavailable(_))
        ));
        assert!(vd_curve(&traces).is_ok());
    }

    #[test]
    fn curve_requires_increasing_steps() {
        assert!(DependencyCurve::new(vec![(1, 0.1), (1, 0.2)]).is_err());
        assert!(DependencyCurve::new(vec![(1, 0.1), (2, 0.2)]).is_ok());
    }

    #[test]
    fn chair_worked_example() {
        let records = vec![
            CaptionRecord::new("c1", mentions(&["dog", "cat"]), set(&["dog"])),
            CaptionRecord::new("c2", mentions(&["car"]), set(&["car", "person"])),
        ];
        let scores = chair_scores(&records).unwrap();
        assert!((scores.c_s - 50.0).abs() < 1e-3);
        assert!((scores.c_i - 33.333).abs() < 1e-3);
        assert!((scores.recall - 66.667).abs() < 1e-3);
    }

    #[test]
    fn chair_perfect_captions() {
        let records = vec![
            CaptionRecord::new("c1", mentions(&["dog"]), set(&["dog"])),
            CaptionRecord::new("c2", mentions(&["car", "person"]), set(&["car", "person"])),
        ];
        let scores = chair_scores(&records).unwrap();
        assert_eq!(scores.c_s, 0.0);
        assert_eq!(scores.c_i, 0.0);
        assert_eq!(scores.recall, 100.0);
    }

    #[test]
    fn chair_duplicate_mentions_count_once_for_cs_each_for_ci() {
        let records = vec![CaptionRecord::new(
            "c1",
            mentions(&["cat", "cat", "dog"]),
            set(&["dog"]),
        )];
        let scores = chair_scores(&records).unwrap();
        assert!((scores.c_s - 100.0).abs() < 1e-9);
        assert!((scores.c_i - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn chair_no_mentions_defines_ci_zero() {
        let records = vec![CaptionRecord::new("c1", vec![], set(&["dog"]))];
        let scores = chair_scores(&records).unwrap();
        assert_eq!(scores.c_i, 0.0);
        assert_eq!(scores.c_s, 0.0);
        assert_eq!(scores.recall, 0.0);
    }

    #[test]
    fn chair_rejects_empty_inputs() {
        assert!(matches!(chair_scores(&[]), Err(EvalError::Empty(_))));
        let records = vec![CaptionRecord::new("c1", mentions(&["dog"]), set(&[]))];
        assert!(matches!(
            chair_scores(&records),
            Err(EvalError::EmptyGroundTruth(_))
        ));
    }

    #[test]
    fn chair_permutation_invariant() {
        let mut records = vec![
            CaptionRecord::new("a", mentions(&["dog", "cat"]), set(&["dog"])),
            CaptionRecord::new("b", mentions(&["car"]), set(&["car", "person"])),
            CaptionRecord::new("c", mentions(&["sofa", "sofa"]), set(&["table"])),
        ];
        let forward = chair_scores(&records).unwrap();
        records.reverse();
        let backward = chair_scores(&records).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn chair_matches_brute_force_on_random_corpora() {
        let objects = ["a", "b", "c", "d", "e"];
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..300 {
            let n = rng.random_range(1..5usize);
            let records: Vec<CaptionRecord> = (0..n)
                .map(|i| {
                    let n_mentions = rng.random_range(0..5usize);
                    let m: Vec<String> = (0..n_mentions)
                        .map(|_| objects[rng.random_range(0..objects.len())].to_string())
                        .collect();
                    let n_gt = rng.random_range(1..4usize);
                    let gt: BTreeSet<String> = (0..n_gt)
                        .map(|_| objects[rng.random_range(0..objects.len())].to_string())
                        .collect();
                    CaptionRecord::new(format!("r{i}"), m, gt)
                })
                .collect();

            let got = chair_scores(&records).unwrap();

            // Oracle: direct set arithmetic per record.
            let mut cs_hits = 0.0;
            let mut hal = 0.0;
            let mut total = 0.0;
            let mut gt_hit = 0.0;
            let mut gt_all = 0.0;
            for r in &records {
                let gen: BTreeSet<&String> = r.mentions.iter().collect();
                if gen.iter().any(|m| !r.gt_objects.contains(*m)) {
                    cs_hits += 1.0;
                }
                for m in &r.mentions {
                    total += 1.0;
                    if !r.gt_objects.contains(m) {
                        hal += 1.0;
                    }
                }
                for o in &r.gt_objects {
                    gt_all += 1.0;
                    if gen.contains(o) {
                        gt_hit += 1.0;
                    }
                }
            }
            let expect_cs = 100.0 * cs_hits / records.len() as f64;
            let expect_ci = if total == 0.0 { 0.0 } else { 100.0 * hal / total };
            let expect_recall = 100.0 * gt_hit / gt_all;
            assert!((got.c_s - expect_cs).abs() < 1e-9);
            assert!((got.c_i - expect_ci).abs() < 1e-9);
            assert!((got.recall - expect_recall).abs() < 1e-9);
        }
    }

    fn pope_item(gold: PopeAnswer, predicted: PopeAnswer) -> PopeItem {
        PopeItem {
            id: "q".into(),
            question_object: "dog".into(),
            gold,
            predicted,
        }
    }

    #[test]
    fn pope_all_correct() {
        let items = vec![
            pope_item(PopeAnswer::Yes, PopeAnswer::Yes),
            pope_item(PopeAnswer::No, PopeAnswer::No),
        ];
        let s = pope_scores(&items).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.f1, 1.0);
    }

    #[test]
    fn pope_confusion_square() {
        let items = vec![
            pope_item(PopeAnswer::Yes, PopeAnswer::Yes),
            pope_item(PopeAnswer::No, PopeAnswer::Yes),
            pope_item(PopeAnswer::No, PopeAnswer::No),
            pope_item(PopeAnswer::Yes, PopeAnswer::No),
        ];
        let s = pope_scores(&items).unwrap();
        assert_eq!(s.accuracy, 0.5);
        assert_eq!(s.f1, 0.5);
    }

    #[test]
    fn pope_degenerate_all_no() {
        let items = vec![
            pope_item(PopeAnswer::Yes, PopeAnswer::No),
            pope_item(PopeAnswer::Yes, PopeAnswer::No),
        ];
        let s = pope_scores(&items).unwrap();
        assert_eq!(s.accuracy, 0.0);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn pope_permutation_invariant() {
        let mut items = vec![
            pope_item(PopeAnswer::Yes, PopeAnswer::Yes),
            pope_item(PopeAnswer::No, PopeAnswer::Yes),
            pope_item(PopeAnswer::No, PopeAnswer::No),
        ];
        let forward = pope_scores(&items).unwrap();
        items.reverse();
        assert_eq!(forward, pope_scores(&items).unwrap());
    }
}
