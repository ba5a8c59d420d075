use super::spec::LossKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch-mean loss and its gradient with respect to `output`.
pub fn loss_and_grad(kind: LossKind, output: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    match kind {
        LossKind::CrossEntropySoftmax => cross_entropy(output, targets),
        LossKind::Mse => mse(output, targets),
    }
}

fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    let &[batch, classes] = logits.shape() else {
        return Err(Error::Dimension(format!(
            "cross entropy expects B×C logits, got {:?}",
            logits.shape()
        )));
    };
    if targets.len() != batch {
        return Err(Error::Dimension(format!(
            "cross entropy: {batch} logit rows but {} targets",
            targets.len()
        )));
    }
    let mut grad = vec![0.0; batch * classes];
    let mut total = 0.0;
    let inv_b = 1.0 / batch as f64;
    for (b, &t) in targets.data().iter().enumerate() {
        let class = t as usize;
        if t < 0.0 || t.fract() != 0.0 || class >= classes {
            return Err(Error::Dimension(format!(
                "target {t} is not a class index in [0, {classes})"
            )));
        }
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &z in row {
            sum += (z - max).exp();
        }
        let lse = max + sum.ln();
        total += lse - row[class];
        let g = &mut grad[b * classes..(b + 1) * classes];
        for (gc, &z) in g.iter_mut().zip(row) {
            *gc = (z - lse).exp() * inv_b;
        }
        g[class] -= inv_b;
    }
    Ok((total * inv_b, Tensor::new(logits.shape().to_vec(), grad)?))
}

fn mse(pred: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    if pred.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "mse: prediction has {} elements, targets {}",
            pred.len(),
            targets.len()
        )));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(targets.data()) {
        let r = p - t;
        total += r * r;
        grad.push(2.0 * r / n);
    }
    Ok((total / n, Tensor::new(pred.shape().to_vec(), grad)?))
}
