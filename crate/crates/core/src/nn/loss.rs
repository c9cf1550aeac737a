use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::symptom::{SymptomVector, NUM_CLASSES, NUM_SYMPTOMS};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(row: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = row.mapv(|v| (v - max).exp());
    let z = exp.sum();
    exp / z
}

/// Mean over the 18 heads of the per-head softmax cross-entropy.
///
/// Returns the loss and its gradient with respect to the `18 x 3` logits,
/// `(softmax - onehot) / 18`.
pub fn multihead_cross_entropy(logits: ArrayView2<'_, f64>, target: &SymptomVector) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != (NUM_SYMPTOMS, NUM_CLASSES) {
        return Err(Error::Shape(format!(
            "logits have shape {:?}, expected ({NUM_SYMPTOMS}, {NUM_CLASSES})",
            logits.dim()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite logits".into()));
    }
    let scale = 1.0 / NUM_SYMPTOMS as f64;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((NUM_SYMPTOMS, NUM_CLASSES));
    for (s, (row, &class)) in logits.rows().into_iter().zip(target.classes()).enumerate() {
        let c = class.index();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[c];
        let p = softmax(row);
        for k in 0..NUM_CLASSES {
            let onehot = if k == c { 1.0 } else { 0.0 };
            grad[[s, k]] = (p[k] - onehot) * scale;
        }
    }
    Ok((loss * scale, grad))
}
