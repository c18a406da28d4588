use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::{ClassHead, ClassifierNet, CriticNet};

/// Index of the largest `max(p_a[k], p_b[k])`; the lowest index wins ties.
pub fn predict_one(p_a: &[f64], p_b: &[f64]) -> Result<usize> {
    if p_a.len() != p_b.len() || p_a.is_empty() {
        return Err(Error::shape(
            "decision rule",
            format!("head widths {} and {}", p_a.len(), p_b.len()),
        ));
    }
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, (a, b)) in p_a.iter().zip(p_b).enumerate() {
        let v = a.max(*b);
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    Ok(best)
}

/// Row-wise decision rule over two probability tables.
pub fn predict(p_dprime: &Tensor, p_c: &Tensor) -> Result<Vec<usize>> {
    if p_dprime.shape() != p_c.shape() {
        return Err(Error::shape(
            "decision rule",
            format!("{:?} vs {:?}", p_dprime.shape(), p_c.shape()),
        ));
    }
    (0..p_dprime.dims2().0)
        .map(|r| predict_one(p_dprime.row_slice(r), p_c.row_slice(r)))
        .collect()
}

fn argmax_rows(p: &Tensor) -> Vec<usize> {
    (0..p.dims2().0)
        .map(|r| {
            let row = p.row_slice(r);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Percent of `pred` equal to `truth`.
pub fn percent_correct(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Accuracy of the combined decision, in percent.
    pub a_t: f64,
    pub acc_dprime: f64,
    pub acc_c: f64,
    pub acc_ensemble: f64,
}

/// Single-head accuracy on the union test set of all classes seen so far.
pub fn average_accuracy(
    critic: &CriticNet,
    classifier: &ClassifierNet,
    x: &Tensor,
    y: &[usize],
) -> Result<AccuracyReport> {
    if y.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    if critic.num_classes() != classifier.num_classes() {
        return Err(Error::shape(
            "decision rule",
            format!(
                "auxiliary head has {} classes, classifier {}",
                critic.num_classes(),
                classifier.num_classes()
            ),
        ));
    }
    let pd = critic.aux_classifier_forward(x)?;
    let pc = classifier.classifier_forward(x)?;
    let ens = percent_correct(&predict(&pd, &pc)?, y)?;
    Ok(AccuracyReport {
        a_t: ens,
        acc_dprime: percent_correct(&argmax_rows(&pd), y)?,
        acc_c: percent_correct(&argmax_rows(&pc), y)?,
        acc_ensemble: ens,
    })
}
