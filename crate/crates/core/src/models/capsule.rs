//! Capsule primitives: squash, routing-by-agreement and the margin loss.
//!
//! The math runs in `f64` on `ndarray` views, with hand-derived backward
//! passes; the `*_node` functions wrap them as graph ops.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{CustomOp, Graph, Tensor, Var};

/// Output capsules of one input, row `c` is `v_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleActivations {
    pub class_vectors: Array2<f64>,
}

impl CapsuleActivations {
    pub fn norms(&self) -> Array1<f64> {
        self.class_vectors
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect()
    }

    pub fn n_classes(&self) -> usize {
        self.class_vectors.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginLossParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginLossParams {
    fn default() -> Self {
        Self {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

impl MarginLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0 && self.lambda > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid margin loss parameters {self:?}")));
        }
        Ok(())
    }
}

/// `|s|^2 / (1 + |s|^2) * s / |s|`, which simplifies to `s * |s| / (1 + |s|^2)`.
fn squash_factor(norm_sq: f64) -> f64 {
    norm_sq.sqrt() / (1.0 + norm_sq)
}

pub fn squash(s: ArrayView1<f64>) -> Array1<f64> {
    let f = squash_factor(s.dot(&s));
    s.mapv(|v| v * f)
}

/// Vector-Jacobian product of [`squash`] at `s`.
pub fn squash_backward(s: ArrayView1<f64>, grad_v: ArrayView1<f64>) -> Array1<f64> {
    let n2 = s.dot(&s);
    if n2 == 0.0 {
        return Array1::zeros(s.len());
    }
    let n = n2.sqrt();
    let f = n / (1.0 + n2);
    // d/dn [n / (1 + n^2)] / n
    let radial = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2)) / n;
    let proj = s.dot(&grad_v);
    &grad_v * f + &s * (radial * proj)
}

fn squash_slice(s: &mut [f64]) {
    let f = squash_factor(s.iter().map(|v| v * v).sum());
    s.iter_mut().for_each(|v| *v *= f);
}

/// Routing result with the coupling coefficients used at every iteration.
#[derive(Debug, Clone)]
pub struct RoutingTrace {
    pub activations: CapsuleActivations,
    /// `iters` matrices of shape `n_in x n_out`.
    pub couplings: Vec<Array2<f64>>,
    pub(crate) pre_squash: Vec<Array2<f64>>,
    pub(crate) outputs: Vec<Array2<f64>>,
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Routing by agreement over `predictions[i, j, :]` (input capsule `i`'s
/// vote for output capsule `j`). Logits start at zero; each iteration
/// softmaxes them over outputs, forms `s_j = sum_i c_ij u_ij`, squashes,
/// and adds the agreement `u_ij . v_j` to the logits.
pub fn dynamic_routing(predictions: ArrayView3<f64>, iters: usize) -> Result<RoutingTrace> {
    if iters == 0 {
        return Err(Error::InvalidConfig("routing needs at least one iteration".into()));
    }
    let (n_in, n_out, dim) = predictions.dim();
    if let Some(pos) = predictions.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation {
            stage: "routing input".into(),
            detail: format!("prediction element {pos} is not finite"),
        });
    }
    let mut logits = Array2::<f64>::zeros((n_in, n_out));
    let mut couplings = Vec::with_capacity(iters);
    let mut pre_squash = Vec::with_capacity(iters);
    let mut outputs = Vec::with_capacity(iters);
    for it in 0..iters {
        let c = softmax_rows(&logits);
        let mut s = Array2::<f64>::zeros((n_out, dim));
        for i in 0..n_in {
            for j in 0..n_out {
                let w = c[[i, j]];
                s.row_mut(j).scaled_add(w, &predictions.slice(s![i, j, ..]));
            }
        }
        let mut v = s.clone();
        for mut row in v.rows_mut() {
            squash_slice(row.as_slice_mut().expect("contiguous"));
        }
        if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteActivation {
                stage: format!("routing iteration {it}"),
                detail: format!("output capsule {} is not finite", pos / dim),
            });
        }
        if it + 1 < iters {
            for i in 0..n_in {
                for j in 0..n_out {
                    logits[[i, j]] += predictions.slice(s![i, j, ..]).dot(&v.row(j));
                }
            }
        }
        couplings.push(c);
        pre_squash.push(s);
        outputs.push(v);
    }
    Ok(RoutingTrace {
        activations: CapsuleActivations {
            class_vectors: outputs.last().expect("iters >= 1").clone(),
        },
        couplings,
        pre_squash,
        outputs,
    })
}

/// Gradient of the final routing output w.r.t. the predictions,
/// differentiating through every iteration (couplings included).
pub fn dynamic_routing_backward(
    predictions: ArrayView3<f64>,
    iters: usize,
    grad_output: ArrayView2<f64>,
) -> Result<Array3<f64>> {
    let trace = dynamic_routing(predictions, iters)?;
    Ok(routing_backward_with_trace(predictions, &trace, grad_output))
}

fn routing_backward_with_trace(
    predictions: ArrayView3<f64>,
    trace: &RoutingTrace,
    grad_output: ArrayView2<f64>,
) -> Array3<f64> {
    let (n_in, n_out, dim) = predictions.dim();
    let iters = trace.outputs.len();
    let mut grad_pred = Array3::<f64>::zeros((n_in, n_out, dim));
    // Gradient w.r.t. the logits entering iteration r + 1.
    let mut grad_next_logits = Array2::<f64>::zeros((n_in, n_out));

    for r in (0..iters).rev() {
        let c = &trace.couplings[r];
        let s_r = &trace.pre_squash[r];
        let v_r = &trace.outputs[r];

        let mut grad_v = if r + 1 == iters {
            grad_output.to_owned()
        } else {
            Array2::zeros((n_out, dim))
        };
        if r + 1 < iters {
            // logits^{r+1}_ij = logits^r_ij + u_ij . v^r_j
            for i in 0..n_in {
                for j in 0..n_out {
                    let gb = grad_next_logits[[i, j]];
                    if gb != 0.0 {
                        grad_v.row_mut(j).scaled_add(gb, &predictions.slice(s![i, j, ..]));
                        grad_pred.slice_mut(s![i, j, ..]).scaled_add(gb, &v_r.row(j));
                    }
                }
            }
        }

        let mut grad_s = Array2::<f64>::zeros((n_out, dim));
        for j in 0..n_out {
            grad_s.row_mut(j).assign(&squash_backward(s_r.row(j), grad_v.row(j)));
        }

        let mut grad_logits = grad_next_logits.clone();
        for i in 0..n_in {
            let mut gc = vec![0.0; n_out];
            for j in 0..n_out {
                let u = predictions.slice(s![i, j, ..]);
                gc[j] = grad_s.row(j).dot(&u);
                grad_pred.slice_mut(s![i, j, ..]).scaled_add(c[[i, j]], &grad_s.row(j));
            }
            let weighted: f64 = (0..n_out).map(|j| c[[i, j]] * gc[j]).sum();
            for j in 0..n_out {
                grad_logits[[i, j]] += c[[i, j]] * (gc[j] - weighted);
            }
        }
        grad_next_logits = grad_logits;
    }
    grad_pred
}

/// Margin loss of one example, summed over classes; `target` must be one-hot.
pub fn margin_loss(
    activations: &CapsuleActivations,
    target: ArrayView1<f64>,
    params: &MarginLossParams,
) -> Result<f64> {
    if target.len() != activations.n_classes() {
        return Err(Error::ShapeMismatch(format!(
            "{} capsules, target over {} classes",
            activations.n_classes(),
            target.len()
        )));
    }
    let ones = target.iter().filter(|&&t| t == 1.0).count();
    if ones != 1 || target.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::ShapeMismatch("target must be one-hot".into()));
    }
    Ok(activations
        .norms()
        .iter()
        .zip(target)
        .map(|(&n, &t)| margin_term(n, t, params))
        .sum())
}

fn margin_term(norm: f64, t: f64, p: &MarginLossParams) -> f64 {
    t * (p.m_plus - norm).max(0.0).powi(2) + p.lambda * (1.0 - t) * (norm - p.m_minus).max(0.0).powi(2)
}

fn margin_term_grad(norm: f64, t: f64, p: &MarginLossParams) -> f64 {
    -2.0 * t * (p.m_plus - norm).max(0.0) + 2.0 * p.lambda * (1.0 - t) * (norm - p.m_minus).max(0.0)
}

/// Batch margin loss over `vectors: [B, C, D]`: summed over classes,
/// averaged over the batch. Returns the gradient w.r.t. `vectors`.
pub fn margin_loss_batch(
    vectors: ArrayView3<f64>,
    targets: &[usize],
    params: &MarginLossParams,
) -> Result<(f64, Array3<f64>)> {
    let (b, c, _) = vectors.dim();
    if targets.len() != b {
        return Err(Error::ShapeMismatch(format!("{b} examples, {} targets", targets.len())));
    }
    let mut grad = Array3::<f64>::zeros(vectors.raw_dim());
    let mut total = 0.0;
    for (n, &target) in targets.iter().enumerate() {
        if target >= c {
            return Err(Error::ShapeMismatch(format!("target {target} outside {c} classes")));
        }
        for k in 0..c {
            let v = vectors.slice(s![n, k, ..]);
            let norm = v.dot(&v).sqrt();
            let t = if k == target { 1.0 } else { 0.0 };
            total += margin_term(norm, t, params);
            if norm > 0.0 {
                let dn = margin_term_grad(norm, t, params) / b as f64;
                grad.slice_mut(s![n, k, ..]).scaled_add(dn / norm, &v);
            }
        }
    }
    Ok((total / b as f64, grad))
}

fn view3(t: &Tensor) -> Result<Array3<f64>> {
    match *t.shape() {
        [a, b, c] => Ok(Array3::from_shape_vec((a, b, c), t.to_f64()).expect("shape checked")),
        _ => Err(Error::ShapeMismatch(format!("expected rank 3, got {:?}", t.shape()))),
    }
}

struct SquashOp;

impl CustomOp for SquashOp {
    fn name(&self) -> &'static str {
        "squash"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let dim = *x.shape().last().expect("rank >= 1");
        let xs = x.to_f64();
        let gs = grad.to_f64();
        let mut out = vec![0.0f64; xs.len()];
        for ((s, g), o) in xs.chunks(dim).zip(gs.chunks(dim)).zip(out.chunks_mut(dim)) {
            let r = squash_backward(ArrayView1::from(s), ArrayView1::from(g));
            o.copy_from_slice(r.as_slice().expect("contiguous"));
        }
        Ok(vec![Some(Tensor::from_f64(x.shape(), &out)?)])
    }
}

/// Squashes every vector along the last axis.
pub fn squash_node(g: &mut Graph, x: Var) -> Result<Var> {
    let t = g.value(x);
    let dim = *t.shape().last().ok_or_else(|| Error::ShapeMismatch("squash of a scalar".into()))?;
    let mut xs = t.to_f64();
    xs.chunks_mut(dim).for_each(squash_slice);
    let out = Tensor::from_f64(t.shape(), &xs)?;
    Ok(g.custom(&[x], out, Box::new(SquashOp)))
}

struct PrimaryLayoutOp {
    caps_channels: usize,
    caps_dim: usize,
    height: usize,
    width: usize,
}

impl PrimaryLayoutOp {
    /// Flat index of conv output `(n, ch * dim + d, y, x)` and capsule
    /// element `(n, (ch * H + y) * W + x, d)`.
    fn for_each(&self, batch: usize, mut f: impl FnMut(usize, usize)) {
        let (cc, dim, h, w) = (self.caps_channels, self.caps_dim, self.height, self.width);
        for n in 0..batch {
            for ch in 0..cc {
                for d in 0..dim {
                    for y in 0..h {
                        for x in 0..w {
                            let conv = ((n * cc * dim + ch * dim + d) * h + y) * w + x;
                            let caps = ((n * cc * h * w) + (ch * h + y) * w + x) * dim + d;
                            f(conv, caps);
                        }
                    }
                }
            }
        }
    }
}

impl CustomOp for PrimaryLayoutOp {
    fn name(&self) -> &'static str {
        "primary_capsule_layout"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let mut out = vec![0.0f32; x.numel()];
        let gs = grad.data();
        self.for_each(x.shape()[0], |conv, caps| out[conv] = gs[caps]);
        Ok(vec![Some(Tensor::from_vec(x.shape(), out)?)])
    }
}

/// Regroups a primary-capsule conv output `[N, C * D, H, W]` into
/// `[N, C * H * W, D]` capsule vectors.
pub fn primary_capsules_node(g: &mut Graph, x: Var, caps_dim: usize) -> Result<Var> {
    let (n, ch, h, w) = g.value(x).dims4()?;
    if ch % caps_dim != 0 {
        return Err(Error::ShapeMismatch(format!("{ch} channels do not split into {caps_dim}-d capsules")));
    }
    let op = PrimaryLayoutOp {
        caps_channels: ch / caps_dim,
        caps_dim,
        height: h,
        width: w,
    };
    let xs = g.value(x).data();
    let mut out = vec![0.0f32; xs.len()];
    op.for_each(n, |conv, caps| out[caps] = xs[conv]);
    let t = Tensor::from_vec(&[n, op.caps_channels * h * w, caps_dim], out)?;
    Ok(g.custom(&[x], t, Box::new(op)))
}

struct PredictOp;

impl CustomOp for PredictOp {
    fn name(&self) -> &'static str {
        "capsule_predict"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (u, w) = (inputs[0], inputs[1]);
        let (n, i_caps, din) = (u.shape()[0], u.shape()[1], u.shape()[2]);
        let (j_caps, dout) = (w.shape()[1], w.shape()[2]);
        let (us, ws, gs) = (u.data(), w.data(), grad.data());
        let mut gu = vec![0.0f32; us.len()];
        let mut gw = vec![0.0f32; ws.len()];
        for b in 0..n {
            for i in 0..i_caps {
                let uv = &us[(b * i_caps + i) * din..(b * i_caps + i + 1) * din];
                let gu_i = &mut gu[(b * i_caps + i) * din..(b * i_caps + i + 1) * din];
                for j in 0..j_caps {
                    let g_row = &gs[((b * i_caps + i) * j_caps + j) * dout..][..dout];
                    let w_base = (i * j_caps + j) * dout * din;
                    for (o, &go) in g_row.iter().enumerate() {
                        let wr = &ws[w_base + o * din..w_base + (o + 1) * din];
                        let gwr = &mut gw[w_base + o * din..w_base + (o + 1) * din];
                        for d in 0..din {
                            gwr[d] += go * uv[d];
                            gu_i[d] += go * wr[d];
                        }
                    }
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_vec(u.shape(), gu)?),
            Some(Tensor::from_vec(w.shape(), gw)?),
        ])
    }
}

/// Votes `u_hat[n, i, j] = W[i, j] @ u[n, i]` with `u: [N, I, Din]` and
/// `W: [I, J, Dout, Din]`.
pub fn predict_node(g: &mut Graph, u: Var, w: Var) -> Result<Var> {
    let ut = g.value(u);
    let wt = g.value(w);
    let (n, i_caps, din) = match *ut.shape() {
        [a, b, c] => (a, b, c),
        _ => return Err(Error::ShapeMismatch(format!("capsules must be rank 3, got {:?}", ut.shape()))),
    };
    let (wi, j_caps, dout, wd) = wt.dims4()?;
    if wi != i_caps || wd != din {
        return Err(Error::ShapeMismatch(format!(
            "{i_caps} input capsules of dim {din} against routing weights {:?}",
            wt.shape()
        )));
    }
    let (us, ws) = (ut.data(), wt.data());
    let mut out = vec![0.0f32; n * i_caps * j_caps * dout];
    for b in 0..n {
        for i in 0..i_caps {
            let uv = &us[(b * i_caps + i) * din..(b * i_caps + i + 1) * din];
            for j in 0..j_caps {
                let w_base = (i * j_caps + j) * dout * din;
                let dst = &mut out[((b * i_caps + i) * j_caps + j) * dout..][..dout];
                for (o, slot) in dst.iter_mut().enumerate() {
                    let wr = &ws[w_base + o * din..w_base + (o + 1) * din];
                    *slot = wr.iter().zip(uv).map(|(a, b)| a * b).sum();
                }
            }
        }
    }
    let t = Tensor::from_vec(&[n, i_caps, j_caps, dout], out)?;
    Ok(g.custom(&[u, w], t, Box::new(PredictOp)))
}

struct RoutingOp {
    iters: usize,
}

impl CustomOp for RoutingOp {
    fn name(&self) -> &'static str {
        "dynamic_routing"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let u = inputs[0];
        let (n, i_caps, j_caps, dim) = u.dims4()?;
        let per = i_caps * j_caps * dim;
        let mut out = Vec::with_capacity(u.numel());
        for b in 0..n {
            let pred = Array3::from_shape_vec(
                (i_caps, j_caps, dim),
                u.data()[b * per..(b + 1) * per].iter().map(|&v| v as f64).collect(),
            )
            .expect("shape checked");
            let g = Array2::from_shape_vec(
                (j_caps, dim),
                grad.data()[b * j_caps * dim..(b + 1) * j_caps * dim].iter().map(|&v| v as f64).collect(),
            )
            .expect("shape checked");
            let gp = dynamic_routing_backward(pred.view(), self.iters, g.view())?;
            out.extend(gp.iter().map(|&v| v as f32));
        }
        Ok(vec![Some(Tensor::from_vec(u.shape(), out)?)])
    }
}

/// Routes votes `[N, I, J, D]` to output capsules `[N, J, D]`.
pub fn routing_node(g: &mut Graph, u_hat: Var, iters: usize) -> Result<Var> {
    let t = g.value(u_hat);
    let (n, i_caps, j_caps, dim) = t.dims4()?;
    let per = i_caps * j_caps * dim;
    let mut out = Vec::with_capacity(n * j_caps * dim);
    for b in 0..n {
        let pred = Array3::from_shape_vec(
            (i_caps, j_caps, dim),
            t.data()[b * per..(b + 1) * per].iter().map(|&v| v as f64).collect(),
        )
        .expect("shape checked");
        let trace = dynamic_routing(pred.view(), iters)?;
        out.extend(trace.activations.class_vectors.iter().map(|&v| v as f32));
    }
    let t = Tensor::from_vec(&[n, j_caps, dim], out)?;
    Ok(g.custom(&[u_hat], t, Box::new(RoutingOp { iters })))
}

/// Margin loss of capsules `[B, C, D]` as a scalar graph node.
pub fn margin_loss_node(g: &mut Graph, v: Var, targets: &[usize], params: &MarginLossParams) -> Result<Var> {
    let arr = view3(g.value(v))?;
    let (loss, grad) = margin_loss_batch(arr.view(), targets, params)?;
    let grad = Tensor::from_f64(&[grad.dim().0, grad.dim().1, grad.dim().2], grad.as_slice().expect("standard"))?;
    g.scalar_with_grads("margin_loss", &[v], loss, vec![Some(grad)])
}

/// Capsule norms `[B, C]` from capsule vectors `[B, C, D]`.
pub fn capsule_norms(t: &Tensor) -> Result<Array2<f64>> {
    let arr = view3(t)?;
    Ok(arr.map_axis(Axis(2), |v| v.dot(&v).sqrt()))
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array};

    use super::*;
    use crate::gradcheck::{central_difference, relative_error};

    #[test]
    fn squash_zero_and_unit() {
        assert_eq!(squash(array![0.0, 0.0, 0.0].view()), array![0.0, 0.0, 0.0]);
        let v = squash(array![0.6, 0.8].view());
        assert!((v.dot(&v).sqrt() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn squash_is_radial() {
        let s = array![0.3, -0.2, 0.5];
        let a = squash(s.view());
        let b = squash((&s * 3.0).view());
        let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
        assert!(nb > na);
        assert!(((&a / na) - (&b / nb)).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn single_iteration_uses_uniform_couplings() {
        let pred = Array::from_shape_fn((3, 2, 2), |(i, j, d)| (i + 2 * j) as f64 * 0.1 + d as f64 * 0.05);
        let trace = dynamic_routing(pred.view(), 1).unwrap();
        for j in 0..2 {
            let mean = pred.slice(s![.., j, ..]).sum_axis(Axis(0)) / 2.0;
            let expected = squash(mean.view());
            for d in 0..2 {
                assert!((trace.activations.class_vectors[[j, d]] - expected[d]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn agreement_grows_coupling_mass() {
        // Output 0 receives identical unit votes; output 1 receives conflicting ones.
        let pred = array![
            [[1.0, 0.0], [0.0, 1.0]],
            [[1.0, 0.0], [0.0, -1.0]]
        ];
        let trace = dynamic_routing(pred.view(), 3).unwrap();
        let mass: Vec<f64> = trace.couplings.iter().map(|c| c.column(0).sum()).collect();
        assert!(mass[0] < mass[1] && mass[1] < mass[2], "{mass:?}");
    }

    #[test]
    fn zero_iterations_rejected() {
        let pred = Array3::<f64>::zeros((2, 2, 2));
        assert!(dynamic_routing(pred.view(), 0).is_err());
    }

    #[test]
    fn non_finite_votes_rejected() {
        let mut pred = Array3::<f64>::zeros((2, 2, 2));
        pred[[1, 0, 1]] = f64::NAN;
        assert!(matches!(dynamic_routing(pred.view(), 2), Err(Error::NonFiniteActivation { .. })));
    }

    #[test]
    fn routing_gradient_matches_finite_differences() {
        let pred = Array::from_shape_fn((3, 2, 3), |(i, j, d)| ((i * 7 + j * 3 + d * 5) % 11) as f64 / 11.0 - 0.4);
        let weights = Array::from_shape_fn((2, 3), |(j, d)| (j as f64 + 1.0) * 0.3 - d as f64 * 0.2);
        let analytic = dynamic_routing_backward(pred.view(), 3, weights.view()).unwrap();
        let x: Vec<f64> = pred.iter().cloned().collect();
        let fd = central_difference(
            |v| {
                let p = Array3::from_shape_vec((3, 2, 3), v.to_vec()).unwrap();
                let out = dynamic_routing(p.view(), 3).unwrap().activations.class_vectors;
                (&out * &weights).sum()
            },
            &x,
            1e-6,
        );
        assert!(relative_error(analytic.as_slice().unwrap(), &fd) < 1e-7);
    }

    #[test]
    fn margin_loss_reference_values() {
        let p = MarginLossParams::default();
        let caps = |rows: Vec<[f64; 2]>| CapsuleActivations {
            class_vectors: Array2::from_shape_vec((rows.len(), 2), rows.concat()).unwrap(),
        };
        let onehot = array![1.0, 0.0, 0.0];
        let at_margins = caps(vec![[0.9, 0.0], [0.1, 0.0], [0.0, 0.05]]);
        assert!(margin_loss(&at_margins, onehot.view(), &p).unwrap().abs() < 1e-15);
        let silent = caps(vec![[0.0, 0.0]; 3]);
        assert!((margin_loss(&silent, onehot.view(), &p).unwrap() - 0.81).abs() < 1e-12);
        let loud_other = caps(vec![[0.9, 0.0], [0.0, 0.6], [0.0, 0.0]]);
        assert!((margin_loss(&loud_other, onehot.view(), &p).unwrap() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn margin_loss_rejects_bad_targets() {
        let p = MarginLossParams::default();
        let caps = CapsuleActivations {
            class_vectors: Array2::zeros((3, 2)),
        };
        assert!(margin_loss(&caps, array![1.0, 1.0, 0.0].view(), &p).is_err());
        assert!(margin_loss(&caps, array![1.0, 0.0].view(), &p).is_err());
    }

    #[test]
    fn margin_batch_gradient_matches_finite_differences() {
        let p = MarginLossParams::default();
        let v = Array::from_shape_fn((2, 3, 2), |(b, c, d)| 0.2 + 0.15 * (b + c) as f64 - 0.1 * d as f64);
        let targets = [1, 2];
        let (_, grad) = margin_loss_batch(v.view(), &targets, &p).unwrap();
        let x: Vec<f64> = v.iter().cloned().collect();
        let fd = central_difference(
            |w| {
                let a = Array3::from_shape_vec((2, 3, 2), w.to_vec()).unwrap();
                margin_loss_batch(a.view(), &targets, &p).unwrap().0
            },
            &x,
            1e-6,
        );
        assert!(relative_error(grad.as_slice().unwrap(), &fd) < 1e-7);
    }
}
