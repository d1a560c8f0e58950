use alloc::vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mcc: f64,
    /// Set when the correlation is undefined (a constant prediction or label vector) and reported as 0.
    pub mcc_undefined: bool,
}

/// Accuracy, macro-averaged F1 and the multiclass Matthews correlation.
pub fn classification_metrics(predicted: &[usize], actual: &[usize], num_labels: usize) -> Result<Metrics> {
    if predicted.len() != actual.len() {
        return Err(Error::LengthMismatch { left: predicted.len(), right: actual.len() });
    }
    if predicted.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let mut confusion = vec![vec![0usize; num_labels]; num_labels];
    for (&p, &a) in predicted.iter().zip(actual) {
        if p >= num_labels || a >= num_labels {
            return Err(Error::LabelOutOfRange { label: p.max(a), num_labels });
        }
        confusion[a][p] += 1;
    }
    let n = predicted.len() as f64;
    let correct: usize = (0..num_labels).map(|l| confusion[l][l]).sum();
    let mut f1 = 0.0;
    let mut pred_totals = vec![0.0; num_labels];
    let mut true_totals = vec![0.0; num_labels];
    for l in 0..num_labels {
        let tp = confusion[l][l] as f64;
        let actual_l: usize = confusion[l].iter().sum();
        let pred_l: usize = (0..num_labels).map(|a| confusion[a][l]).sum();
        true_totals[l] = actual_l as f64;
        pred_totals[l] = pred_l as f64;
        let denom = actual_l as f64 + pred_l as f64;
        if denom > 0.0 {
            f1 += 2.0 * tp / denom;
        }
    }
    let c = correct as f64;
    let cov = c * n - pred_totals.iter().zip(&true_totals).map(|(p, t)| p * t).sum::<f64>();
    let vp = n * n - pred_totals.iter().map(|p| p * p).sum::<f64>();
    let vt = n * n - true_totals.iter().map(|t| t * t).sum::<f64>();
    let (mcc, mcc_undefined) = if vp == 0.0 || vt == 0.0 { (0.0, true) } else { (cov / libm::sqrt(vp * vt), false) };
    Ok(Metrics { accuracy: c / n, macro_f1: f1 / num_labels as f64, mcc, mcc_undefined })
}
