//! Contractive autoencoder terms for projecting capsule vectors.
//!
//! Encoder `h = W2 tanh(W1 z + b1) + b2`, so the Jacobian is
//! `J = W2 diag(d) W1` with `d = 1 - tanh^2(a)`, and
//! `||J||_F^2 = d^T (G1 . G2) d`, `G1 = W1 W1^T`, `G2 = W2^T W2`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

#[derive(Debug, Clone)]
pub struct ContractiveTerms {
    /// Batch mean of the squared Frobenius norm of the encoder Jacobian.
    pub value: f64,
    pub grad_pre: Array2<f64>,
    pub grad_w1: Array2<f64>,
    pub grad_w2: Array2<f64>,
}

/// `||W2 diag(d) W1||_F^2` for a single pre-activation vector.
pub fn jacobian_frobenius_sq(pre: ArrayView1<f64>, w1: ArrayView2<f64>, w2: ArrayView2<f64>) -> f64 {
    let d = pre.mapv(|a| 1.0 - a.tanh().powi(2));
    let g1 = w1.dot(&w1.t());
    let g2 = w2.t().dot(&w2);
    let gd = (&g1 * &g2).dot(&d);
    d.dot(&gd)
}

/// Contractive penalty over a batch of encoder pre-activations `pre: [B, H]`
/// with `w1: [H, Z]`, `w2: [M, H]`, plus its gradients.
pub fn contractive_penalty(
    pre: ArrayView2<f64>,
    w1: ArrayView2<f64>,
    w2: ArrayView2<f64>,
) -> Result<ContractiveTerms> {
    let (b, h) = pre.dim();
    if w1.nrows() != h || w2.ncols() != h {
        return Err(Error::ShapeMismatch(format!(
            "hidden width {h} against encoder weights {:?} and {:?}",
            w1.dim(),
            w2.dim()
        )));
    }
    if b == 0 {
        return Err(Error::EmptyInput);
    }
    let t = pre.mapv(f64::tanh);
    let d = t.mapv(|v| 1.0 - v * v);
    let g1 = w1.dot(&w1.t());
    let g2 = w2.t().dot(&w2);
    let g = &g1 * &g2;
    // Rows of `gd` are G d_n (G is symmetric).
    let gd = d.dot(&g);
    let inv_b = 1.0 / b as f64;
    let value = (&d * &gd).sum() * inv_b;
    // d(d)/da = -2 t d
    let grad_pre = (&gd * &d * &t) * (-4.0 * inv_b);
    let s = d.t().dot(&d) * inv_b;
    let grad_w1 = (&s * &g2).dot(&w1) * 2.0;
    let grad_w2 = w2.dot(&(&s * &g1)) * 2.0;
    Ok(ContractiveTerms {
        value,
        grad_pre,
        grad_w1,
        grad_w2,
    })
}

/// Batch mean of `||z - z_hat||^2` with gradients w.r.t. both arguments.
pub fn reconstruction_loss(z: ArrayView2<f64>, z_hat: ArrayView2<f64>) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if z.dim() != z_hat.dim() {
        return Err(Error::ShapeMismatch(format!("reconstruction {:?} vs {:?}", z_hat.dim(), z.dim())));
    }
    let b = z.nrows();
    if b == 0 {
        return Err(Error::EmptyInput);
    }
    let diff = &z - &z_hat;
    let value = diff.mapv(|v| v * v).sum() / b as f64;
    let gz = &diff * (2.0 / b as f64);
    let gzh = -&gz;
    Ok((value, gz, gzh))
}

/// Per-example reconstruction errors `||z_n - z_hat_n||^2`.
pub fn reconstruction_errors(z: ArrayView2<f64>, z_hat: ArrayView2<f64>) -> Array1<f64> {
    (&z - &z_hat).mapv(|v| v * v).sum_axis(Axis(1))
}

pub(crate) fn to_array2(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    Ok(Array2::from_shape_vec((r, c), t.to_f64()).expect("shape checked"))
}

pub(crate) fn from_array2(a: &Array2<f64>) -> Result<Tensor> {
    let owned = a.as_standard_layout();
    Tensor::from_f64(&[a.nrows(), a.ncols()], owned.as_slice().expect("standard layout"))
}

/// Contractive penalty as a scalar graph node over `pre`, `w1`, `w2`.
pub fn contractive_node(g: &mut Graph, pre: Var, w1: Var, w2: Var) -> Result<Var> {
    let terms = contractive_penalty(
        to_array2(g.value(pre))?.view(),
        to_array2(g.value(w1))?.view(),
        to_array2(g.value(w2))?.view(),
    )?;
    let grads = vec![
        Some(from_array2(&terms.grad_pre)?),
        Some(from_array2(&terms.grad_w1)?),
        Some(from_array2(&terms.grad_w2)?),
    ];
    g.scalar_with_grads("contractive_penalty", &[pre, w1, w2], terms.value, grads)
}

/// Reconstruction loss as a scalar graph node.
pub fn reconstruction_node(g: &mut Graph, z: Var, z_hat: Var) -> Result<Var> {
    let (value, gz, gzh) = reconstruction_loss(to_array2(g.value(z))?.view(), to_array2(g.value(z_hat))?.view())?;
    let grads = vec![Some(from_array2(&gz)?), Some(from_array2(&gzh)?)];
    g.scalar_with_grads("reconstruction_loss", &[z, z_hat], value, grads)
}
