//! Macro-averaged F1 and confusion diagnostics.

use std::io::Write;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Rows are true classes, columns predictions.
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

pub fn confusion(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Input(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut counts = vec![0u64; n_classes * n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::Input(format!("label pair ({t}, {p}) outside [0, {n_classes})")));
        }
        counts[t * n_classes + p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

pub fn per_class_report(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    let n = cm.n_classes;
    (0..n)
        .map(|k| {
            let tp = cm.get(k, k) as f64;
            let support: u64 = (0..n).map(|j| cm.get(k, j)).sum();
            let predicted: u64 = (0..n).map(|i| cm.get(i, k)).sum();
            let ratio = |num: f64, den: u64| if den == 0 { 0.0 } else { num / den as f64 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let den = support + predicted;
            ClassScores {
                precision,
                recall,
                f1: ratio(2.0 * tp, den),
                support,
            }
        })
        .collect()
}

/// Unweighted mean of per-class F1 over all `n_classes` classes; a class
/// absent from both sequences scores 0.
pub fn f1_macro(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<f64> {
    let report = per_class_report(&confusion(truth, pred, n_classes)?);
    Ok(macro_mean(&report))
}

pub fn macro_mean(report: &[ClassScores]) -> f64 {
    if report.is_empty() {
        return 0.0;
    }
    report.iter().map(|s| s.f1).sum::<f64>() / report.len() as f64
}

/// CSV with one row per class and a final `macro` row.
pub fn write_report<W: Write>(out: W, report: &[ClassScores], symbols: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Input(format!("writing report: {e}"));
    w.write_record(["class", "precision", "recall", "f1", "support"]).map_err(err)?;
    for (k, s) in report.iter().enumerate() {
        let name = symbols.get(k).cloned().unwrap_or_else(|| k.to_string());
        w.write_record([
            name,
            format!("{:.6}", s.precision),
            format!("{:.6}", s.recall),
            format!("{:.6}", s.f1),
            s.support.to_string(),
        ])
        .map_err(err)?;
    }
    let n = report.len().max(1) as f64;
    w.write_record([
        "macro".to_string(),
        format!("{:.6}", report.iter().map(|s| s.precision).sum::<f64>() / n),
        format!("{:.6}", report.iter().map(|s| s.recall).sum::<f64>() / n),
        format!("{:.6}", macro_mean(report)),
        report.iter().map(|s| s.support).sum::<u64>().to_string(),
    ])
    .map_err(err)?;
    w.flush().map_err(|e| Error::Input(format!("writing report: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_confusion() {
        let cm = confusion(&[3], &[5], 39).unwrap();
        assert_eq!(cm.get(3, 5), 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn perfect_is_one_and_diagonal() {
        let y: Vec<usize> = (0..39).collect();
        assert_eq!(f1_macro(&y, &y, 39).unwrap(), 1.0);
        let cm = confusion(&y, &y, 39).unwrap();
        assert!((0..39).all(|k| cm.get(k, k) == 1));
    }

    #[test]
    fn length_mismatch_is_input_error() {
        assert!(matches!(f1_macro(&[1, 2], &[1], 39), Err(Error::Input(_))));
    }
}
