//! Softmax cross-entropy, computed in `f64` with its analytic gradient.

use ndarray::{Array2, ArrayView2};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Mean negative log-likelihood of `targets` under `softmax(logits)`, and
/// its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: ArrayView2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    if targets.len() != b {
        return Err(Error::ShapeMismatch(format!("{b} rows of logits, {} targets", targets.len())));
    }
    let mut grad = Array2::zeros((b, c));
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::ShapeMismatch(format!("target {t} outside {c} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        for (j, &v) in row.iter().enumerate() {
            grad[[i, j]] = ((v - lse).exp() - if j == t { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((total / b as f64, grad))
}

/// Records the cross-entropy of `logits: [B, C]` as a scalar graph node.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let t = g.value(logits);
    let (b, c) = t.dims2()?;
    let view = Array2::from_shape_vec((b, c), t.to_f64()).expect("dims checked");
    let (loss, grad) = softmax_cross_entropy(view.view(), targets)?;
    let grad = Tensor::from_f64(&[b, c], grad.as_slice().expect("standard layout"))?;
    g.scalar_with_grads("cross_entropy", &[logits], loss, vec![Some(grad)])
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;
    use crate::gradcheck::{central_difference, relative_error};

    #[test]
    fn uniform_logits_give_log_classes() {
        let (loss, _) = softmax_cross_entropy(array![[0.0, 0.0, 0.0, 0.0]].view(), &[2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = array![[0.3, -1.2, 2.0], [0.1, 0.4, -0.7]];
        let targets = [2, 0];
        let (_, grad) = softmax_cross_entropy(logits.view(), &targets).unwrap();
        let x: Vec<f64> = logits.iter().cloned().collect();
        let fd = central_difference(
            |v| {
                let a = Array2::from_shape_vec((2, 3), v.to_vec()).unwrap();
                softmax_cross_entropy(a.view(), &targets).unwrap().0
            },
            &x,
            1e-6,
        );
        assert!(relative_error(grad.as_slice().unwrap(), &fd) < 1e-7);
    }
}
