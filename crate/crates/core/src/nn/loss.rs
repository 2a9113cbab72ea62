use nalgebra::DMatrix;

use crate::error::{Error, Result};

fn check_same(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

fn check_labels(logits: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} rows of logits for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.ncols()) {
        return Err(Error::Shape(format!("label {bad} out of range for {} classes", logits.ncols())));
    }
    Ok(())
}

/// Mean of squared errors over all entries.
pub fn mse_loss(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<f64> {
    check_same(pred, target)?;
    let sum: f64 = pred.iter().zip(target.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn mse_grad(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_same(pred, target)?;
    let scale = 2.0 / pred.len() as f64;
    Ok((pred - target) * scale)
}

/// `1 - SS_res / SS_tot` over all entries; undefined for constant targets.
pub fn r2_score(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<f64> {
    check_same(pred, target)?;
    let mean = target.mean();
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("R^2 of constant targets".into()));
    }
    let ss_res: f64 = pred.iter().zip(target.iter()).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Mean negative log-likelihood of `labels` under the softmax of `logits`.
pub fn cross_entropy_loss(logits: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let mut total = 0.0;
    for (row, &l) in logits.row_iter().zip(labels) {
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    Ok(total / labels.len() as f64)
}

/// Gradient of [`cross_entropy_loss`] with respect to the logits.
pub fn cross_entropy_grad(logits: &DMatrix<f64>, labels: &[usize]) -> Result<DMatrix<f64>> {
    check_labels(logits, labels)?;
    let mut g = softmax_rows(logits);
    for (i, &l) in labels.iter().enumerate() {
        g[(i, l)] -= 1.0;
    }
    Ok(g / labels.len() as f64)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &DMatrix<f64>) -> Vec<usize> {
    logits
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn top1_accuracy(logits: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
