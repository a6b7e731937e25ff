use super::tensor::Activations;
use crate::error::{Error, Result};

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Mean softmax cross-entropy and its logit gradient `(softmax − onehot) / N`.
pub fn softmax_xent_grad(logits: &Activations, labels: &[usize]) -> Result<(f64, Activations)> {
    let n = logits.n();
    let c = logits.shape().len();
    if labels.len() != n {
        return Err(Error::dim("labels", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside head of {c} classes"
        )));
    }
    let mut grad = logits.clone();
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (row, &y) in grad.data_mut().chunks_exact_mut(c).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        softmax_in_place(row);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv_n);
    }
    Ok((loss * inv_n, grad))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
