use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch.
///
/// Returns the loss and its gradient w.r.t. the logits, `(softmax − onehot)/B`.
/// Softmax is stabilized by subtracting each row's maximum.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = logits.dims2("cross_entropy")?;
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "cross_entropy: {} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut grad = Tensor::zeros(&[b, k]);
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for ((row, g), &label) in logits
        .data()
        .chunks(k)
        .zip(grad.data_mut().chunks_mut(k))
        .zip(labels)
    {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp();
            z += *gi;
        }
        total += z.ln() - (row[label] - max);
        for gi in g.iter_mut() {
            *gi = *gi / z * inv_b;
        }
        g[label] -= inv_b;
    }
    Ok((total * inv_b, grad))
}

/// Index of the largest logit per row (first on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Pixelwise binary cross-entropy on logits, summed over pixels and
/// averaged over the batch. Returns the loss and the logit gradient.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "bce: logits {:?} vs target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    let b = logits.shape()[0].max(1) as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for ((g, &l), &t) in grad.data_mut().iter_mut().zip(logits.data()).zip(target.data()) {
        // softplus(l) − t·l, written to avoid overflow for large |l|
        total += l.max(0.0) - l * t + (-l.abs()).exp().ln_1p();
        let s = 1.0 / (1.0 + (-l).exp());
        *g = (s - t) / b;
    }
    Ok((total / b, grad))
}
