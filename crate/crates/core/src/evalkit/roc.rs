use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-vs-rest ROC curve. Point 0 is `(0, 0)` with no threshold; point
/// `i > 0` is reached by predicting positive for every score `>=
/// thresholds[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub thresholds: Vec<Option<f64>>,
    pub auc: f64,
}

/// Sweeps thresholds over distinct scores in descending order. Equal scores
/// form a single step, so ties contribute a diagonal segment.
pub fn roc_curve(scores: &[f64], positives: &[bool]) -> Result<RocCurve> {
    if scores.len() != positives.len() {
        return Err(Error::shape("roc_curve", &[scores.len()], &[positives.len()]));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("roc score {s}")));
    }
    let p = positives.iter().filter(|&&b| b).count();
    let n = positives.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::invalid("roc_curve needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut curve = RocCurve {
        fpr: vec![0.0],
        tpr: vec![0.0],
        thresholds: vec![None],
        auc: 0.0,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.fpr.push(fp as f64 / n as f64);
        curve.tpr.push(tp as f64 / p as f64);
        curve.thresholds.push(Some(s));
    }
    curve.auc = curve
        .fpr
        .windows(2)
        .zip(curve.tpr.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[1] + y[0]) / 2.0)
        .sum();
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let c = roc_curve(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!(c.fpr.last(), Some(&1.0));
        assert_eq!(c.tpr.last(), Some(&1.0));
    }

    #[test]
    fn all_equal_scores_is_one_diagonal_step() {
        let c = roc_curve(&[0.4; 5], &[true, false, true, false, false]).unwrap();
        assert_eq!(c.fpr, [0.0, 1.0]);
        assert_eq!(c.auc, 0.5);
    }

    #[test]
    fn inverted_ranking() {
        let c = roc_curve(&[0.1, 0.9], &[true, false]).unwrap();
        assert_eq!(c.auc, 0.0);
    }

    #[test]
    fn rejects_single_class_and_nan() {
        assert!(roc_curve(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc_curve(&[0.1, 0.2], &[false, false]).is_err());
        assert!(roc_curve(&[f64::NAN, 0.2], &[true, false]).is_err());
        assert!(roc_curve(&[0.2], &[true, false]).is_err());
    }
}
