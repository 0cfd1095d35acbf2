use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeometry, Layout, PoolGeometry};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    /// Running statistics in batch norm; outputs depend only on the input.
    Eval,
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An op whose forward pass is computed by the caller and whose backward
/// pass maps the output gradient onto its inputs.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

/// Scalar op whose input gradients were computed alongside its value.
struct PrecomputedGrad {
    name: &'static str,
    grads: Vec<Option<Tensor>>,
}

impl CustomOp for PrecomputedGrad {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_output: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let scale = grad_output.item();
        Ok(self
            .grads
            .iter()
            .map(|g| {
                g.as_ref().map(|g| {
                    let mut g = g.clone();
                    g.data_mut().iter_mut().for_each(|v| *v *= scale);
                    g
                })
            })
            .collect())
    }
}

enum Op {
    Input,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<u32>,
    },
    Mean {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f64>,
        train: bool,
        inner: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Tanh(Var),
    Add(Var, Var),
    Scale(Var, f32),
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Batch-norm parameters and buffers as stored in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIds {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Define-by-run tape for reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.grads[v.0].as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let needs = store.param(id).is_optimized();
        let v = self.push_shared(store.shared(id), Op::Param, needs);
        self.params.insert(id, v);
        v
    }

    /// Running-statistic updates produced by batch norm in training mode.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, kh, kw) = self.value(w).dims4()?;
        if c != wc {
            return Err(Error::ShapeMismatch(format!(
                "conv input has {c} channels, kernel expects {wc}"
            )));
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: (kh, kw),
            stride,
            padding,
        };
        if !geom.fits() {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding:?}"
            )));
        }
        let (oh, ow) = geom.out_hw();
        let (k, p) = (geom.col_rows(), oh * ow);
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0f32; n * o * p];
        let mut col = vec![0.0f32; k * p];
        for i in 0..n {
            kernels::im2col(&geom, &xs[i * c * h * wd..(i + 1) * c * h * wd], &mut col);
            kernels::sgemm(o, k, p, 1.0, ws, Layout::rows(k), &col, Layout::rows(p), 0.0, &mut out[i * o * p..(i + 1) * o * p]);
        }
        if let Some(b) = b {
            let bs = self.value(b).data();
            if bs.len() != o {
                return Err(Error::ShapeMismatch(format!("conv bias has {} entries, expected {o}", bs.len())));
            }
            for (chunk, &bias) in out.chunks_mut(p).zip(bs.iter().cycle()) {
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::from_vec(&[n, o, oh, ow], out)?,
            Op::Conv2d { x, w, b, geom },
            needs,
        ))
    }

    pub fn max_pool2d(
        &mut self,
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h + 2 * padding.0 < kernel.0 || w + 2 * padding.1 < kernel.1 || padding.0 >= kernel.0 || padding.1 >= kernel.1 {
            return Err(Error::ShapeMismatch(format!(
                "pool {kernel:?} with padding {padding:?} does not fit {h}x{w}"
            )));
        }
        if n * c * h * w > u32::MAX as usize {
            return Err(Error::ShapeMismatch("pool input too large".into()));
        }
        let geom = PoolGeometry {
            height: h,
            width: w,
            kernel,
            stride,
            padding,
        };
        let (oh, ow) = geom.out_hw();
        let xs = self.value(x).data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        for plane in 0..n * c {
            kernels::max_pool_plane(
                &geom,
                &xs[plane * h * w..(plane + 1) * h * w],
                plane * h * w,
                &mut out[plane * oh * ow..(plane + 1) * oh * ow],
                &mut argmax[plane * oh * ow..(plane + 1) * oh * ow],
            );
        }
        let needs = self.needs(x);
        if !needs {
            argmax = Vec::new();
        }
        Ok(self.push(Tensor::from_vec(&[n, c, oh, ow], out)?, Op::MaxPool2d { x, argmax }, needs))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::ShapeMismatch(format!("cannot average axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x).data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xs[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / len as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(&out_shape, out)?, Op::Mean { x, outer, len, inner }, needs))
    }

    /// Batch normalization over every axis but the channel axis (axis 1).
    pub fn batch_norm(&mut self, store: &ParamStore, ids: &NormIds, x: Var, mode: Mode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch(format!("batch norm needs rank >= 2, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let scale = self.param(store, ids.scale);
        let shift = self.param(store, ids.shift);
        if self.value(scale).numel() != c {
            return Err(Error::ShapeMismatch(format!("batch norm over {c} channels with {} scales", self.value(scale).numel())));
        }
        let train = mode == Mode::Train;
        let m = n * inner;
        let xs = self.value(x).data();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();

        let (mean, var): (Vec<f64>, Vec<f64>) = if train {
            (0..c)
                .map(|ch| {
                    let mut sum = 0.0f64;
                    let mut sq = 0.0f64;
                    for i in 0..n {
                        for &v in &xs[(i * c + ch) * inner..(i * c + ch + 1) * inner] {
                            sum += v as f64;
                            sq += (v as f64) * (v as f64);
                        }
                    }
                    let mean = sum / m as f64;
                    (mean, (sq / m as f64 - mean * mean).max(0.0))
                })
                .unzip()
        } else {
            let rm = store.get(ids.running_mean).data();
            let rv = store.get(ids.running_var).data();
            (rm.iter().map(|&v| v as f64).collect(), rv.iter().map(|&v| v as f64).collect())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        let mut out = vec![0.0f32; xs.len()];
        let mut xhat = if needs { vec![0.0f32; xs.len()] } else { Vec::new() };
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    let h = (xs[j] as f64 - mean[ch]) * inv_std[ch];
                    if needs {
                        xhat[j] = h as f32;
                    }
                    out[j] = (gamma[ch] as f64 * h + beta[ch] as f64) as f32;
                }
            }
        }

        if train {
            let rm = store.get(ids.running_mean).data();
            let rv = store.get(ids.running_var).data();
            let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            let new_mean = (0..c)
                .map(|ch| ((1.0 - BN_MOMENTUM) * rm[ch] as f64 + BN_MOMENTUM * mean[ch]) as f32)
                .collect();
            let new_var = (0..c)
                .map(|ch| ((1.0 - BN_MOMENTUM) * rv[ch] as f64 + BN_MOMENTUM * var[ch] * unbias) as f32)
                .collect();
            self.buffer_updates.push((ids.running_mean, Tensor::from_vec(&[c], new_mean)?));
            self.buffer_updates.push((ids.running_var, Tensor::from_vec(&[c], new_var)?));
        }

        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
                inner,
            },
            needs,
        ))
    }

    /// `x @ w^T + b` with `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = self.value(x).dims2()?;
        let (fout, win) = self.value(w).dims2()?;
        if fin != win {
            return Err(Error::ShapeMismatch(format!("linear input width {fin}, weight expects {win}")));
        }
        let mut out = vec![0.0f32; n * fout];
        kernels::sgemm(n, fin, fout, 1.0, self.value(x).data(), Layout::rows(fin), self.value(w).data(), Layout::transposed(fin), 0.0, &mut out);
        if let Some(b) = b {
            let bs = self.value(b).data();
            if bs.len() != fout {
                return Err(Error::ShapeMismatch(format!("linear bias has {} entries, expected {fout}", bs.len())));
            }
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bs).for_each(|(v, b)| *v += b);
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::from_vec(&[n, fout], out)?, Op::Linear { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(t.shape(), t.data().iter().map(|&v| v.max(0.0)).collect()).unwrap();
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(t.shape(), t.data().iter().map(|&v| v.tanh()).collect()).unwrap();
        let needs = self.needs(x);
        self.push(out, Op::Tanh(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(t.shape(), t.data().iter().map(|&v| v * factor).collect()).unwrap();
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, factor), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = Arc::clone(&self.nodes[x.0].value);
        let out = Arc::new((*out).clone().reshaped(shape)?);
        let needs = self.needs(x);
        Ok(self.push_shared(out, Op::Reshape(x), needs))
    }

    /// Records an op whose output the caller already computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
        )
    }

    /// Records a scalar whose gradients w.r.t. `inputs` are already known.
    pub fn scalar_with_grads(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: f64,
        grads: Vec<Option<Tensor>>,
    ) -> Result<Var> {
        if grads.len() != inputs.len() {
            return Err(Error::ShapeMismatch(format!("{name}: {} gradients for {} inputs", grads.len(), inputs.len())));
        }
        for (g, &v) in grads.iter().zip(inputs) {
            if let Some(g) = g {
                if g.shape() != self.shape(v) {
                    return Err(Error::ShapeMismatch(format!("{name}: gradient {:?} for input {:?}", g.shape(), self.shape(v))));
                }
            }
        }
        Ok(self.custom(inputs, Tensor::scalar(value as f32), Box::new(PrecomputedGrad { name, grads })))
    }

    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let gy = match &node.op {
                Op::Input | Op::Param => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(node, &gy, &mut grads)?;
        }

        Ok(Gradients {
            grads,
            params: self.params.iter().map(|(&id, &v)| (id, v)).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gys = gy.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv2d { x, w, b, geom } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let n = xs.shape()[0];
                let o = ws.shape()[0];
                let (oh, ow) = geom.out_hw();
                let (k, p) = (geom.col_rows(), oh * ow);
                let plane = geom.channels * geom.height * geom.width;
                let mut gx = self.needs(*x).then(|| vec![0.0f32; xs.numel()]);
                let mut gw = self.needs(*w).then(|| vec![0.0f32; ws.numel()]);
                let mut col = vec![0.0f32; k * p];
                let mut dcol = vec![0.0f32; if gx.is_some() { k * p } else { 0 }];
                for i in 0..n {
                    let go = &gys[i * o * p..(i + 1) * o * p];
                    if let Some(gw) = gw.as_mut() {
                        kernels::im2col(geom, &xs.data()[i * plane..(i + 1) * plane], &mut col);
                        kernels::sgemm(o, p, k, 1.0, go, Layout::rows(p), &col, Layout::transposed(p), 1.0, gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        kernels::sgemm(k, o, p, 1.0, ws.data(), Layout::transposed(k), go, Layout::rows(p), 0.0, &mut dcol);
                        kernels::col2im(geom, &dcol, &mut gx[i * plane..(i + 1) * plane]);
                    }
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, Tensor::from_vec(xs.shape(), gx)?);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, Tensor::from_vec(ws.shape(), gw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![0.0f32; o];
                        for (j, chunk) in gys.chunks(p).enumerate() {
                            gb[j % o] += chunk.iter().sum::<f32>();
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[o], gb)?);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![0.0f32; self.value(*x).numel()];
                for (&idx, &g) in argmax.iter().zip(gys) {
                    gx[idx as usize] += g;
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), gx)?);
            }
            Op::Mean { x, outer, len, inner } => {
                let inv = 1.0 / *len as f32;
                let mut gx = vec![0.0f32; outer * len * inner];
                for o in 0..*outer {
                    let src = &gys[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * inv);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), gx)?);
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
                inner,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let m = (n * inner) as f64;
                let gamma = self.value(*scale).data();
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for j in base..base + inner {
                            sum_dy[ch] += gys[j] as f64;
                            sum_dy_xhat[ch] += gys[j] as f64 * xhat[j] as f64;
                        }
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0f32; n * c * inner];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * inner;
                            let k = gamma[ch] as f64 * inv_std[ch];
                            for j in base..base + inner {
                                gx[j] = if *train {
                                    (k / m * (m * gys[j] as f64 - sum_dy[ch] - xhat[j] as f64 * sum_dy_xhat[ch])) as f32
                                } else {
                                    (k * gys[j] as f64) as f32
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(shape, gx)?);
                }
                self.accumulate(grads, *scale, Tensor::from_vec(&[c], sum_dy_xhat.iter().map(|&v| v as f32).collect())?);
                self.accumulate(grads, *shift, Tensor::from_vec(&[c], sum_dy.iter().map(|&v| v as f32).collect())?);
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = self.value(*x).dims2()?;
                let fout = self.value(*w).shape()[0];
                if self.needs(*x) {
                    let mut gx = vec![0.0f32; n * fin];
                    kernels::sgemm(n, fout, fin, 1.0, gys, Layout::rows(fout), self.value(*w).data(), Layout::rows(fin), 0.0, &mut gx);
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, fin], gx)?);
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0f32; fout * fin];
                    kernels::sgemm(fout, n, fin, 1.0, gys, Layout::transposed(fout), self.value(*x).data(), Layout::rows(fin), 0.0, &mut gw);
                    self.accumulate(grads, *w, Tensor::from_vec(&[fout, fin], gw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![0.0f32; fout];
                        for row in gys.chunks(fout) {
                            gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[fout], gb)?);
                    }
                }
            }
            Op::Relu(x) => {
                let ys = node.value.data();
                let gx = gys.iter().zip(ys).map(|(&g, &y)| if y > 0.0 { g } else { 0.0 }).collect();
                self.accumulate(grads, *x, Tensor::from_vec(gy.shape(), gx)?);
            }
            Op::Tanh(x) => {
                let ys = node.value.data();
                let gx = gys.iter().zip(ys).map(|(&g, &y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(gy.shape(), gx)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Scale(x, f) => {
                let gx = gys.iter().map(|&g| g * f).collect();
                self.accumulate(grads, *x, Tensor::from_vec(gy.shape(), gx)?);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gy.clone().reshaped(self.shape(*x))?);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gin = op.backward(&values, &node.value, gy)?;
                if gin.len() != inputs.len() {
                    return Err(Error::ShapeMismatch(format!("{} returned {} gradients for {} inputs", op.name(), gin.len(), inputs.len())));
                }
                for (&v, g) in inputs.iter().zip(gin) {
                    if let Some(g) = g {
                        if g.shape() != self.shape(v) {
                            return Err(Error::ShapeMismatch(format!("{}: gradient {:?} for input {:?}", op.name(), g.shape(), self.shape(v))));
                        }
                        self.accumulate(grads, v, g);
                    }
                }
            }
        }
        Ok(())
    }
}
