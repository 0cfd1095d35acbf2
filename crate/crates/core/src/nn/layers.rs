use rand::Rng;

use super::graph::NormIds;
use super::{he_normal, Graph, Mode, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            bias: true,
        }
    }

    pub fn stride(mut self, s: (usize, usize)) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: (usize, usize)) -> Self {
        self.padding = p;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let shape = [spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1];
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            he_normal(&shape, fan_in, gain, rng),
        );
        let bias = spec.bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[spec.out_channels]),
            )
        });
        Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            he_normal(&[fan_out, fan_in], fan_in, gain, rng),
        );
        let bias = Some(store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub ids: NormIds,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let ids = NormIds {
            scale: store.add(format!("{name}.scale"), ParamKind::NormScale, Tensor::full(&[channels], 1.0)),
            shift: store.add(format!("{name}.shift"), ParamKind::NormShift, Tensor::zeros(&[channels])),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::RunningMean, Tensor::zeros(&[channels])),
            running_var: store.add(format!("{name}.running_var"), ParamKind::RunningVar, Tensor::full(&[channels], 1.0)),
        };
        Self { ids }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        g.batch_norm(store, &self.ids, x, mode)
    }
}
