use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

/// First-order optimizer over the trainable entries of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: HashMap<ParamId, Vec<f32>>,
    second: HashMap<ParamId, Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let mut ordered: Vec<(ParamId, &Tensor)> = grads.params().collect();
        ordered.sort_by_key(|(id, _)| *id);
        for (id, g) in ordered {
            if !store.param(id).is_optimized() {
                continue;
            }
            match self.kind {
                OptimizerKind::SgdMomentum => self.sgd(store, id, g),
                OptimizerKind::Adam => self.adam(store, id, g),
            }
        }
    }

    fn sgd(&mut self, store: &mut ParamStore, id: ParamId, g: &Tensor) {
        let vel = self.first.entry(id).or_insert_with(|| vec![0.0; g.numel()]);
        let (lr, mu) = (self.lr as f32, self.momentum as f32);
        let w = store.get_mut(id).data_mut();
        for ((w, v), &g) in w.iter_mut().zip(vel.iter_mut()).zip(g.data()) {
            *v = mu * *v + g;
            *w -= lr * *v;
        }
    }

    fn adam(&mut self, store: &mut ParamStore, id: ParamId, g: &Tensor) {
        let m = self.first.entry(id).or_insert_with(|| vec![0.0; g.numel()]);
        let v = self.second.entry(id).or_insert_with(|| vec![0.0; g.numel()]);
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, (self.eps * c2.sqrt()) as f32);
        let w = store.get_mut(id).data_mut();
        for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= step * *m / (v.sqrt() + eps);
        }
    }
}
