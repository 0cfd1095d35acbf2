use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Fraction of rows whose label ranks among the `k` highest scores. Equal
/// scores rank by column index, lower first.
pub fn topk_accuracy(logits: ArrayView2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!("{b} rows of scores, {} labels", labels.len())));
    }
    if k == 0 || k > c {
        return Err(Error::ShapeMismatch(format!("k={k} outside 1..={c}")));
    }
    if b == 0 {
        return Err(Error::EmptyInput);
    }
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::ShapeMismatch(format!("label {y} outside {c} classes")));
        }
        let row = logits.row(i);
        let s = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > s || (v == s && j < y))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / b as f64)
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn ties_rank_by_index() {
        let l = array![[1.0, 1.0, 1.0]];
        assert_eq!(topk_accuracy(l.view(), &[0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(l.view(), &[2], 2).unwrap(), 0.0);
        assert_eq!(topk_accuracy(l.view(), &[2], 3).unwrap(), 1.0);
    }

    #[test]
    fn bad_shapes() {
        let l = array![[1.0, 2.0]];
        assert!(topk_accuracy(l.view(), &[0], 3).is_err());
        assert!(topk_accuracy(l.view(), &[0, 1], 1).is_err());
        assert!(topk_accuracy(l.view(), &[5], 1).is_err());
    }
}
