use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − onehot) / batch`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor4<T>,
    labels: &[usize],
) -> Result<(f64, Tensor4<T>)> {
    let s = logits.shape();
    let classes = s.sample_len();
    if labels.len() != s.n {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label].as_f64() - max);
        for (k, e) in exps.iter().enumerate() {
            let onehot = if k == label { 1.0 } else { 0.0 };
            grad.push(T::of((e / z - onehot) / s.n as f64));
        }
    }
    Ok((loss / s.n as f64, Tensor4::from_parts(s, grad)))
}

/// Row-wise softmax probabilities.
pub fn softmax_rows<T: Scalar>(logits: &Tensor4<T>) -> Vec<Vec<f64>> {
    let classes = logits.shape().sample_len();
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let max = row
                .iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        })
        .collect()
}
