//! Confusion matrices and the usual remote-sensing scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes, both 1-based labels
/// stored at index `label − 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let classes = counts.len();
        if classes == 0 || counts.iter().any(|r| r.len() != classes) {
            return Err(Error::shape("confusion matrix must be square and non-empty"));
        }
        Ok(Self { classes, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.counts[c][c]).sum()
    }
}

pub fn confusion(preds: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truth.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", preds.len(), truth.len())));
    }
    if classes == 0 {
        return Err(Error::Contract("confusion matrix needs at least one class".into()));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (i, (&p, &t)) in preds.iter().zip(truth).enumerate() {
        for (what, v) in [("prediction", p), ("label", t)] {
            if v == 0 || v > classes {
                return Err(Error::Data(format!("{what} {v} at index {i} outside 1..={classes}")));
            }
        }
        counts[t - 1][p - 1] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Recall of each true class; `None` for classes with no samples.
    pub per_class: Vec<Option<f64>>,
    pub oa: f64,
    /// Mean recall over the classes that have samples.
    pub aa: f64,
    pub kappa: f64,
    /// 1-based classes left out of AA.
    pub skipped_classes: Vec<usize>,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    let n = total as f64;
    let rows: Vec<u64> = cm.counts.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..cm.classes).map(|c| cm.counts.iter().map(|r| r[c]).sum()).collect();
    let per_class: Vec<Option<f64>> = (0..cm.classes)
        .map(|c| (rows[c] > 0).then(|| cm.counts[c][c] as f64 / rows[c] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let skipped_classes = (1..=cm.classes).filter(|&c| per_class[c - 1].is_none()).collect();
    let oa = cm.trace() as f64 / n;
    let pe = rows.iter().zip(&cols).map(|(&r, &c)| r as f64 * c as f64).sum::<f64>() / (n * n);
    // All mass on one row and one column: agreement is certain either way.
    let kappa = if pe == 1.0 { 1.0 } else { (oa - pe) / (1.0 - pe) };
    Ok(MetricsReport {
        aa: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        oa,
        kappa,
        skipped_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_pair() {
        let cm = confusion(&[1, 2], &[2, 2], 2).unwrap();
        assert_eq!(cm.counts, vec![vec![0, 0], vec![1, 1]]);
    }

    #[test]
    fn worked_example() {
        let cm = ConfusionMatrix::from_counts(vec![vec![50, 10], vec![5, 35]]).unwrap();
        let m = metrics(&cm).unwrap();
        assert!((m.oa - 0.85).abs() < 1e-12);
        assert!((m.aa - (50.0 / 60.0 + 35.0 / 40.0) / 2.0).abs() < 1e-12);
        assert!((m.aa - 0.854167).abs() < 1e-6);
        assert!((m.kappa - 0.34 / 0.49).abs() < 1e-12);
        assert!((m.kappa - 0.693878).abs() < 1e-6);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let t = [1, 2, 3, 3, 2];
        let m = metrics(&confusion(&t, &t, 3).unwrap()).unwrap();
        assert_eq!((m.oa, m.aa, m.kappa), (1.0, 1.0, 1.0));
        let m = metrics(&confusion(&[2, 2], &[2, 2], 2).unwrap()).unwrap();
        assert_eq!((m.oa, m.aa, m.kappa), (1.0, 1.0, 1.0));
        assert_eq!(m.skipped_classes, vec![1]);
    }

    #[test]
    fn empty_classes_are_skipped_and_listed() {
        let m = metrics(&confusion(&[1, 3, 3], &[1, 1, 3], 3).unwrap()).unwrap();
        assert_eq!(m.per_class, vec![Some(0.5), None, Some(1.0)]);
        assert_eq!(m.skipped_classes, vec![2]);
        assert!((m.aa - 0.75).abs() < 1e-15);
    }

    #[test]
    fn bad_inputs() {
        match confusion(&[1, 4], &[1, 1], 3) {
            Err(Error::Data(m)) => assert!(m.contains("index 1"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(confusion(&[1], &[0], 3), Err(Error::Data(_))));
        assert!(matches!(confusion(&[1], &[1, 1], 3), Err(Error::Shape(_))));
        let empty = ConfusionMatrix::from_counts(vec![vec![0; 2]; 2]).unwrap();
        assert!(matches!(metrics(&empty), Err(Error::Contract(_))));
    }
}
