//! Evaluation metrics: micro-F1 over positive labels, update probability
//! P_s, memorization probability P_o, and memorization ratio
//! MR = P_o / (P_o + P_s).
//!
//! Scoring counts credit over non-negative labels only: a correct positive
//! prediction is a true positive, a wrong positive prediction a false
//! positive, and every mismatch that touches a positive label a false
//! negative. The negative label earns no credit in either direction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::LabelSet;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records to score")]
    EmptyInput,
    #[error("label `{label}` is not in the label set")]
    UnknownLabel { label: String },
    #[error("record {index} ({id}) is not a filtered conflict record: {reason}")]
    UnfilteredRecord {
        index: usize,
        id: String,
        reason: String,
    },
    #[error("malformed report field `{field}`")]
    MalformedReport { field: String },
}

/// One scored knowledge-conflict instance: the context-determined answer,
/// the memorized pre-substitution answer, and the model's prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub gold_updated: String,
    pub original_label: String,
    pub predicted: String,
}

/// Metrics for one experiment run. Percentages are stored at full precision;
/// [`MetricsReport::rounded`] applies the half-up two-decimal display rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub p_s: f64,
    pub p_o: f64,
    pub mr: f64,
    /// False when P_o + P_s = 0, where MR is undefined (and `mr` is 0.0 only
    /// as a placeholder).
    pub mr_defined: bool,
    pub micro_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub n: u64,
}

impl MetricsReport {
    fn empty() -> Self {
        Self {
            p_s: 0.0,
            p_o: 0.0,
            mr: 0.0,
            mr_defined: false,
            micro_f1: 0.0,
            precision: 0.0,
            recall: 0.0,
            true_pos: 0,
            false_pos: 0,
            false_neg: 0,
            n: 0,
        }
    }

    /// Copy with every percentage rounded half-up to two decimals.
    pub fn rounded(&self) -> Self {
        Self {
            p_s: round2(self.p_s),
            p_o: round2(self.p_o),
            mr: round2(self.mr),
            micro_f1: round2(self.micro_f1),
            precision: round2(self.precision),
            recall: round2(self.recall),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        serde_json::from_str(text).map_err(|e| MetricsError::MalformedReport {
            field: e.to_string(),
        })
    }

    /// Key/value TSV with full-precision floats; parses back losslessly.
    pub fn to_tsv(&self) -> String {
        let mr_field = if self.mr_defined {
            self.mr.to_string()
        } else {
            "undefined".to_string()
        };
        format!(
            "p_s\t{}\np_o\t{}\nmr\t{}\nmicro_f1\t{}\nprecision\t{}\nrecall\t{}\ntrue_pos\t{}\nfalse_pos\t{}\nfalse_neg\t{}\nn\t{}\n",
            self.p_s,
            self.p_o,
            mr_field,
            self.micro_f1,
            self.precision,
            self.recall,
            self.true_pos,
            self.false_pos,
            self.false_neg,
            self.n
        )
    }

    pub fn from_tsv(text: &str) -> Result<Self, MetricsError> {
        let mut report = Self::empty();
        let mut seen_mr_undefined = false;
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('\t').ok_or(MetricsError::MalformedReport {
                field: line.to_string(),
            })?;
            fn parsed<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, MetricsError> {
                value.parse().map_err(|_| MetricsError::MalformedReport {
                    field: key.to_string(),
                })
            }
            match key {
                "p_s" => report.p_s = parsed(key, value)?,
                "p_o" => report.p_o = parsed(key, value)?,
                "mr" => {
                    if value == "undefined" {
                        seen_mr_undefined = true;
                    } else {
                        report.mr = parsed(key, value)?;
                    }
                }
                "micro_f1" => report.micro_f1 = parsed(key, value)?,
                "precision" => report.precision = parsed(key, value)?,
                "recall" => report.recall = parsed(key, value)?,
                "true_pos" => report.true_pos = parsed(key, value)?,
                "false_pos" => report.false_pos = parsed(key, value)?,
                "false_neg" => report.false_neg = parsed(key, value)?,
                "n" => report.n = parsed(key, value)?,
                other => {
                    return Err(MetricsError::MalformedReport {
                        field: other.to_string(),
                    })
                }
            }
        }
        report.mr_defined = !seen_mr_undefined;
        Ok(report)
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let r = self.rounded();
        writeln!(f, "metric      value")?;
        writeln!(f, "P_s         {:>8.2}", r.p_s)?;
        writeln!(f, "P_o         {:>8.2}", r.p_o)?;
        if self.mr_defined {
            writeln!(f, "MR          {:>8.2}", r.mr)?;
        } else {
            writeln!(f, "MR          undefined")?;
        }
        writeln!(f, "micro-F1    {:>8.2}", r.micro_f1)?;
        writeln!(f, "precision   {:>8.2}", r.precision)?;
        writeln!(f, "recall      {:>8.2}", r.recall)?;
        write!(
            f,
            "counts      TP={} FP={} FN={} N={}",
            self.true_pos, self.false_pos, self.false_neg, self.n
        )
    }
}

/// Round half-up to two decimals (display rule).
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// MR from percentage-scale P_s and P_o; `None` when both are zero.
pub fn memorization_ratio(p_s: f64, p_o: f64) -> Option<f64> {
    let denom = p_s + p_o;
    if denom <= 0.0 {
        None
    } else {
        Some(100.0 * p_o / denom)
    }
}

/// Drop records whose original or updated label is the negative label, per
/// the knowledge-conflict evaluation protocol.
pub fn filter_conflicts(records: &[EvalRecord], labels: &LabelSet) -> Vec<EvalRecord> {
    let negative = labels.negative().name.as_str();
    records
        .iter()
        .filter(|r| r.gold_updated != negative && r.original_label != negative)
        .cloned()
        .collect()
}

/// Score a filtered knowledge-conflict record list.
///
/// P_s is the share of records where the prediction matches the updated
/// (context-determined) label; P_o the share where it matches the memorized
/// original. MR is computed from the hit counts. A prediction equal to
/// neither counts toward N but toward neither probability. Micro-F1 is
/// scored against the updated labels.
pub fn conflict_metrics(
    records: &[EvalRecord],
    labels: &LabelSet,
) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let negative = labels.negative().name.as_str();
    let mut n_updated = 0u64;
    let mut n_original = 0u64;
    let mut pairs = Vec::with_capacity(records.len());
    for (index, record) in records.iter().enumerate() {
        for label in [&record.gold_updated, &record.original_label, &record.predicted] {
            if labels.index_of(label).is_none() {
                return Err(MetricsError::UnknownLabel {
                    label: label.clone(),
                });
            }
        }
        if record.gold_updated == record.original_label {
            return Err(MetricsError::UnfilteredRecord {
                index,
                id: record.id.clone(),
                reason: "original and updated labels coincide".into(),
            });
        }
        if record.gold_updated == negative || record.original_label == negative {
            return Err(MetricsError::UnfilteredRecord {
                index,
                id: record.id.clone(),
                reason: "negative label in a conflict record".into(),
            });
        }
        if record.predicted == record.gold_updated {
            n_updated += 1;
        } else if record.predicted == record.original_label {
            n_original += 1;
        }
        pairs.push((record.gold_updated.clone(), record.predicted.clone()));
    }
    let n = records.len() as u64;
    let mut report = micro_f1(&pairs, labels)?;
    report.p_s = 100.0 * n_updated as f64 / n as f64;
    report.p_o = 100.0 * n_original as f64 / n as f64;
    let hits = n_updated + n_original;
    if hits == 0 {
        report.mr = 0.0;
        report.mr_defined = false;
    } else {
        report.mr = 100.0 * n_original as f64 / hits as f64;
        report.mr_defined = true;
    }
    Ok(report)
}

/// Micro-F1 over (gold, predicted) label-name pairs.
pub fn micro_f1(
    pairs: &[(String, String)],
    labels: &LabelSet,
) -> Result<MetricsReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let negative = labels.negative().name.as_str();
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (gold, predicted) in pairs {
        for label in [gold, predicted] {
            if labels.index_of(label).is_none() {
                return Err(MetricsError::UnknownLabel {
                    label: label.clone(),
                });
            }
        }
        if gold == predicted {
            if gold != negative {
                tp += 1;
            }
        } else {
            if predicted != negative {
                fp += 1;
            }
            if gold != negative || predicted != negative {
                fn_ += 1;
            }
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        100.0 * tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        100.0 * tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricsReport {
        micro_f1: f1,
        precision,
        recall,
        true_pos: tp,
        false_pos: fp,
        false_neg: fn_,
        n: pairs.len() as u64,
        ..MetricsReport::empty()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::RelationLabel;
    use proptest::prelude::*;

    fn labels(names: &[&str]) -> LabelSet {
        let mut v: Vec<RelationLabel> = names
            .iter()
            .map(|n| RelationLabel {
                name: n.to_string(),
                is_negative: false,
            })
            .collect();
        v.push(RelationLabel {
            name: "no_relation".into(),
            is_negative: true,
        });
        LabelSet::new(v).unwrap()
    }

    fn record(id: &str, gold: &str, original: &str, predicted: &str) -> EvalRecord {
        EvalRecord {
            id: id.into(),
            gold_updated: gold.into(),
            original_label: original.into(),
            predicted: predicted.into(),
        }
    }

    /// Build a conflict record list yielding exact hit counts.
    fn synthetic_records(n_updated: u64, n_original: u64, n_other: u64) -> Vec<EvalRecord> {
        let mut records = Vec::new();
        for i in 0..n_updated {
            records.push(record(&format!("u{i}"), "r1", "r2", "r1"));
        }
        for i in 0..n_original {
            records.push(record(&format!("o{i}"), "r1", "r2", "r2"));
        }
        for i in 0..n_other {
            records.push(record(&format!("x{i}"), "r1", "r2", "r3"));
        }
        records
    }

    #[test]
    fn table2_mr_display_from_counts() {
        // Table 2 rows reconstructed as hit counts over the 47-instance
        // conflict set: (updated, original) hits per row.
        let set = labels(&["r1", "r2", "r3"]);
        let rows: [(u64, u64, f64, f64, f64); 4] = [
            (26, 9, 55.32, 19.15, 25.71),  // attribute
            (30, 8, 63.83, 17.02, 21.05),  // opinion
            (28, 1, 59.57, 2.13, 3.45),    // ours
            (25, 4, 53.19, 8.51, 13.79),   // w/o random order
        ];
        for (n_s, n_o, p_s, p_o, mr) in rows {
            let records = synthetic_records(n_s, n_o, 47 - n_s - n_o);
            let report = conflict_metrics(&records, &set).unwrap().rounded();
            assert_eq!(report.p_s, p_s);
            assert_eq!(report.p_o, p_o);
            assert!(report.mr_defined);
            assert_eq!(report.mr, mr);
        }
    }

    #[test]
    fn mr_from_percentages_matches_table2_within_two_decimals() {
        let rows = [
            (55.32, 19.15, 25.71),
            (63.83, 17.02, 21.05),
            (59.57, 2.13, 3.45),
            (53.19, 8.51, 13.79),
        ];
        for (p_s, p_o, expected) in rows {
            let mr = memorization_ratio(p_s, p_o).unwrap();
            assert!(
                (mr - expected).abs() <= 0.01,
                "MR({p_s}, {p_o}) = {mr}, expected about {expected}"
            );
        }
    }

    #[test]
    fn zero_p_o_gives_zero_mr() {
        assert_eq!(memorization_ratio(23.40, 0.0), Some(0.0));
        let set = labels(&["r1", "r2", "r3"]);
        let report = conflict_metrics(&synthetic_records(11, 0, 36), &set).unwrap();
        assert!(report.mr_defined);
        assert_eq!(round2(report.mr), 0.00);
    }

    #[test]
    fn mr_undefined_when_no_hits() {
        assert_eq!(memorization_ratio(0.0, 0.0), None);
        let set = labels(&["r1", "r2", "r3"]);
        let report = conflict_metrics(&synthetic_records(0, 0, 5), &set).unwrap();
        assert!(!report.mr_defined, "MR must be flagged undefined, not 0");
    }

    #[test]
    fn conflict_metrics_rejects_empty_and_unfiltered_input() {
        let set = labels(&["r1", "r2"]);
        assert!(matches!(
            conflict_metrics(&[], &set),
            Err(MetricsError::EmptyInput)
        ));
        let same = vec![record("a", "r1", "r1", "r2")];
        assert!(matches!(
            conflict_metrics(&same, &set),
            Err(MetricsError::UnfilteredRecord { .. })
        ));
        let negative = vec![record("a", "r1", "no_relation", "r2")];
        assert!(matches!(
            conflict_metrics(&negative, &set),
            Err(MetricsError::UnfilteredRecord { .. })
        ));
    }

    #[test]
    fn filter_conflicts_drops_negative_rows() {
        let set = labels(&["r1", "r2"]);
        let records = vec![
            record("keep", "r1", "r2", "r1"),
            record("neg_gold", "no_relation", "r2", "r1"),
            record("neg_orig", "r1", "no_relation", "r1"),
        ];
        let kept = filter_conflicts(&records, &set);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "keep");
    }

    #[test]
    fn micro_f1_hand_counted_example() {
        let set = labels(&["r1", "r2"]);
        let pairs = vec![
            ("r1".to_string(), "r1".to_string()),
            ("r2".to_string(), "no_relation".to_string()),
            ("no_relation".to_string(), "r2".to_string()),
        ];
        let report = micro_f1(&pairs, &set).unwrap();
        assert_eq!(
            (report.true_pos, report.false_pos, report.false_neg),
            (1, 1, 2)
        );
        let r = report.rounded();
        assert_eq!(r.precision, 50.00);
        assert_eq!(r.recall, 33.33);
        assert_eq!(r.micro_f1, 40.00);
    }

    #[test]
    fn perfect_predictions_score_100() {
        let set = labels(&["r1", "r2"]);
        let pairs = vec![
            ("r1".to_string(), "r1".to_string()),
            ("r2".to_string(), "r2".to_string()),
            ("no_relation".to_string(), "no_relation".to_string()),
        ];
        let report = micro_f1(&pairs, &set).unwrap();
        assert_eq!(report.micro_f1, 100.0);
    }

    #[test]
    fn all_negative_predictions_on_positive_gold_score_zero() {
        let set = labels(&["r1", "r2"]);
        let pairs: Vec<(String, String)> = (0..4)
            .map(|i| (format!("r{}", i % 2 + 1), "no_relation".to_string()))
            .collect();
        let report = micro_f1(&pairs, &set).unwrap();
        assert_eq!(report.micro_f1, 0.0);
        assert_eq!(report.true_pos, 0);
    }

    #[test]
    fn unknown_label_is_an_error() {
        let set = labels(&["r1"]);
        let pairs = vec![("mystery".to_string(), "r1".to_string())];
        assert!(matches!(
            micro_f1(&pairs, &set),
            Err(MetricsError::UnknownLabel { .. })
        ));
    }

    #[test]
    fn mr_is_scale_invariant() {
        let set = labels(&["r1", "r2", "r3"]);
        let base = conflict_metrics(&synthetic_records(26, 9, 12), &set).unwrap();
        for factor in [2u64, 3, 7] {
            let scaled = conflict_metrics(
                &synthetic_records(26 * factor, 9 * factor, 12 * factor),
                &set,
            )
            .unwrap();
            assert!((scaled.p_s - base.p_s).abs() < 1e-9);
            assert!((scaled.p_o - base.p_o).abs() < 1e-9);
            assert!((scaled.mr - base.mr).abs() < 1e-9);
            assert!((scaled.micro_f1 - base.micro_f1).abs() < 1e-9);
        }
    }

    #[test]
    fn mr_monotone_in_each_argument() {
        let mut prev = memorization_ratio(40.0, 5.0).unwrap();
        for p_o in [10.0, 20.0, 35.0, 50.0] {
            let mr = memorization_ratio(40.0, p_o).unwrap();
            assert!(mr > prev, "MR must increase with P_o at fixed P_s");
            prev = mr;
        }
        let mut prev = memorization_ratio(5.0, 20.0).unwrap();
        for p_s in [10.0, 25.0, 45.0, 70.0] {
            let mr = memorization_ratio(p_s, 20.0).unwrap();
            assert!(mr < prev, "MR must decrease with P_s at fixed P_o");
            prev = mr;
        }
    }

    #[test]
    fn report_round_trips_through_json_and_tsv() {
        let set = labels(&["r1", "r2", "r3"]);
        let report = conflict_metrics(&synthetic_records(26, 9, 12), &set).unwrap();
        assert_eq!(MetricsReport::from_json(&report.to_json()).unwrap(), report);
        assert_eq!(MetricsReport::from_tsv(&report.to_tsv()).unwrap(), report);
        // undefined MR survives the trip too
        let undef = conflict_metrics(&synthetic_records(0, 0, 3), &set).unwrap();
        assert_eq!(MetricsReport::from_tsv(&undef.to_tsv()).unwrap(), undef);
        assert_eq!(MetricsReport::from_json(&undef.to_json()).unwrap(), undef);
    }

    proptest! {
        #[test]
        fn micro_f1_is_permutation_invariant(
            golds in proptest::collection::vec(0usize..3, 1..30),
            preds in proptest::collection::vec(0usize..3, 1..30),
            seed in 0u64..1000,
        ) {
            let set = labels(&["r1", "r2"]);
            let names = ["r1", "r2", "no_relation"];
            let n = golds.len().min(preds.len());
            let mut pairs: Vec<(String, String)> = (0..n)
                .map(|i| (names[golds[i]].to_string(), names[preds[i]].to_string()))
                .collect();
            let base = micro_f1(&pairs, &set).unwrap();
            // deterministic shuffle
            use rand::seq::SliceRandom;
            pairs.shuffle(&mut crate::seeds::rng(seed));
            let shuffled = micro_f1(&pairs, &set).unwrap();
            prop_assert_eq!(base, shuffled);
        }
    }
}
