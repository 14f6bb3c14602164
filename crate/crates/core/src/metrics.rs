//! ROC AUC and attribution-AUC.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::GroundTruth;
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("ROC AUC needs at least one positive and one negative label")]
    SingleClass,
    #[error("no inputs")]
    EmptyInput,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score")]
    NonFinite,
}

/// Mann-Whitney U over average ranks, divided by `n_pos * n_neg`.
pub fn roc_auc<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let values: Vec<f64> = scores.iter().map(|s| s.as_f64()).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Ranks are 1-based; a tie group shares the mean of its ranks.
        let avg = (start + 1 + end) as f64 / 2.0;
        let tied_pos = order[start..end].iter().filter(|&&i| labels[i]).count();
        pos_rank_sum += avg * tied_pos as f64;
        start = end;
    }
    let np = n_pos as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleculeAuc {
    pub present_auc: Option<f64>,
    pub absent_auc: Option<f64>,
    pub final_auc: Option<f64>,
    /// Labelings that produced a defined AUC.
    pub n_labelings_tried: usize,
}

fn best_over<T: Scalar>(scores: &[T], labelings: &[std::collections::BTreeSet<usize>], negate: bool) -> (Option<f64>, usize) {
    let s: Vec<f64> = scores
        .iter()
        .map(|v| if negate { -v.as_f64() } else { v.as_f64() })
        .collect();
    let mut best: Option<f64> = None;
    let mut tried = 0;
    for l in labelings {
        let labels: Vec<bool> = (0..s.len()).map(|i| l.contains(&i)).collect();
        if let Ok(auc) = roc_auc(&s, &labels) {
            tried += 1;
            best = Some(best.map_or(auc, |b: f64| b.max(auc)));
        }
    }
    (best, tried)
}

/// Present half: best AUC of the scores over present labelings. Absent half:
/// the same over absent labelings with negated scores. Single-class labelings
/// are skipped; the final value is the mean of the defined halves.
pub fn attribution_auc_molecule<T: Scalar>(scores: &[T], gt: &GroundTruth) -> MoleculeAuc {
    let (present_auc, tp) = best_over(scores, &gt.present_labelings, false);
    let (absent_auc, ta) = best_over(scores, &gt.absent_labelings, true);
    let final_auc = match (present_auc, absent_auc) {
        (Some(p), Some(a)) => Some((p + a) / 2.0),
        (Some(v), None) | (None, Some(v)) => Some(v),
        (None, None) => None,
    };
    MoleculeAuc {
        present_auc,
        absent_auc,
        final_auc,
        n_labelings_tried: tp + ta,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleculeAucRow {
    pub id: String,
    #[serde(flatten)]
    pub auc: MoleculeAuc,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub excluded: Option<String>,
}

/// One scored molecule: its id, aggregated scores (or the reason it has
/// none) and ground truth.
pub struct AucInput<'a, T> {
    pub id: &'a str,
    pub scores: Result<&'a [T], String>,
    pub ground_truth: Result<&'a GroundTruth, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionAucReport {
    pub per_molecule: Vec<MoleculeAucRow>,
    /// Mean final AUC over molecules where it is defined.
    pub dataset_mean: Option<f64>,
    pub n_included: usize,
    pub n_excluded: usize,
    pub exclusion_reasons: BTreeMap<String, usize>,
    pub exclusion_rule: String,
}

pub const EXCLUSION_RULE: &str = "A half with no scorable labeling is skipped; a molecule with neither half defined, \
a degenerate attribution sum or a ground-truth error is excluded from the mean.";

pub fn attribution_auc_dataset<T: Scalar>(inputs: &[AucInput<'_, T>]) -> Result<AttributionAucReport, MetricsError> {
    if inputs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut rows = Vec::with_capacity(inputs.len());
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    let mut sum = 0.0;
    let mut n = 0;
    for input in inputs {
        let undefined = MoleculeAuc {
            present_auc: None,
            absent_auc: None,
            final_auc: None,
            n_labelings_tried: 0,
        };
        let (auc, excluded) = match (&input.scores, &input.ground_truth) {
            (Err(reason), _) | (_, Err(reason)) => (undefined, Some(reason.clone())),
            (Ok(scores), Ok(gt)) => {
                let auc = attribution_auc_molecule(scores, gt);
                let reason = auc.final_auc.is_none().then(|| "no scorable labeling".to_string());
                (auc, reason)
            }
        };
        match (&excluded, auc.final_auc) {
            (None, Some(v)) => {
                sum += v;
                n += 1;
            }
            (Some(r), _) => *reasons.entry(r.clone()).or_insert(0) += 1,
            (None, None) => unreachable!("undefined final AUC always carries a reason"),
        }
        rows.push(MoleculeAucRow {
            id: input.id.to_string(),
            auc,
            excluded,
        });
    }
    Ok(AttributionAucReport {
        per_molecule: rows,
        dataset_mean: (n > 0).then(|| sum / n as f64),
        n_included: n,
        n_excluded: inputs.len() - n,
        exclusion_reasons: reasons,
        exclusion_rule: EXCLUSION_RULE.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn roc_examples() {
        let s = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(roc_auc(&s, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&s, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.5, 0.4], &[true, true]), Err(MetricsError::SingleClass));
        assert_eq!(roc_auc::<f64>(&[], &[]), Err(MetricsError::EmptyInput));
        assert!(matches!(roc_auc(&[0.1], &[true, false]), Err(MetricsError::LengthMismatch { .. })));
    }

    #[test]
    fn molecule_halves() {
        let scores = [0.3, 0.25, 0.2, 0.15, 0.1, 0.05, -0.05];
        let gt = GroundTruth {
            label: true,
            present_labelings: vec![set(&[0, 1])],
            absent_labelings: vec![set(&[6])],
        };
        let auc = attribution_auc_molecule(&scores, &gt);
        assert_eq!(auc.present_auc, Some(1.0));
        assert_eq!(auc.absent_auc, Some(1.0));
        assert_eq!(auc.final_auc, Some(1.0));
        assert_eq!(auc.n_labelings_tried, 2);

        let all = GroundTruth {
            label: true,
            present_labelings: vec![set(&[0, 1, 2, 3, 4, 5, 6])],
            absent_labelings: vec![],
        };
        let auc = attribution_auc_molecule(&scores, &all);
        assert_eq!(auc.final_auc, None);
    }

    #[test]
    fn dataset_exclusions() {
        let scores = [0.5, 0.3, 0.2];
        let gt = GroundTruth {
            label: true,
            present_labelings: vec![set(&[0])],
            absent_labelings: vec![],
        };
        let empty = GroundTruth {
            label: false,
            present_labelings: vec![],
            absent_labelings: vec![],
        };
        let inputs = vec![
            AucInput { id: "a", scores: Ok(&scores[..]), ground_truth: Ok(&gt) },
            AucInput { id: "b", scores: Ok(&scores[..]), ground_truth: Ok(&empty) },
            AucInput { id: "c", scores: Err("degenerate attribution sum".into()), ground_truth: Ok(&gt) },
        ];
        let report = attribution_auc_dataset(&inputs).unwrap();
        assert_eq!(report.dataset_mean, Some(1.0));
        assert_eq!((report.n_included, report.n_excluded), (1, 2));
        assert_eq!(report.exclusion_reasons.len(), 2);
        assert_eq!(attribution_auc_dataset::<f64>(&[]), Err(MetricsError::EmptyInput));
    }
}
