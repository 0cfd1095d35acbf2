use rand::Rng;

use super::NetOutput;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, ConvSpec, Graph, Linear, Mode, ParamStore, Var};

/// Layer widths, kernels, strides and paddings of conv1..conv5.
const CONVS: [(usize, usize, usize, usize); 5] = [(96, 7, 2, 1), (256, 5, 2, 1), (384, 3, 1, 1), (256, 3, 1, 1), (256, 3, 1, 1)];
const FC6_WIDTH: usize = 4096;
const FC7_WIDTH: usize = 1024;
const FC6_MAX_HEIGHT: usize = 9;

#[derive(Debug, Clone)]
pub(crate) struct VggM {
    convs: Vec<(Conv2d, BatchNorm)>,
    fc6: Conv2d,
    bn6: BatchNorm,
    fc7: Linear,
    bn7: BatchNorm,
    fc8: Linear,
}

fn conv_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Feature-map height entering fc6 for a given number of input bins.
pub(crate) fn height_before_fc6(bins: usize) -> Option<usize> {
    let mut h = bins;
    for (i, &(_, k, s, p)) in CONVS.iter().enumerate() {
        h = conv_out(h, k, s, p)?;
        if i < 2 {
            h = conv_out(h, 3, 2, 0)?;
        }
    }
    conv_out(h, 5, 3, 0)
}

impl VggM {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        bins: usize,
        n_classes: usize,
        embedding_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let h6 = height_before_fc6(bins)
            .filter(|&h| h > 0)
            .ok_or_else(|| Error::InvalidConfig(format!("{bins} input bins are too few for VGG-M")))?;
        let mut convs = Vec::new();
        let mut in_ch = 1;
        for (i, &(out, k, s, p)) in CONVS.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            let spec = ConvSpec::new(in_ch, out, (k, k)).stride((s, s)).padding((p, p));
            let conv = Conv2d::new(store, &name, spec, 1.0, rng);
            let bn = BatchNorm::new(store, &format!("{name}.bn"), out);
            convs.push((conv, bn));
            in_ch = out;
        }
        let fc6 = Conv2d::new(store, "fc6", ConvSpec::new(in_ch, FC6_WIDTH, (h6.min(FC6_MAX_HEIGHT), 1)), 1.0, rng);
        let bn6 = BatchNorm::new(store, "fc6.bn", FC6_WIDTH);
        let fc7 = Linear::new(store, "fc7", FC6_WIDTH, FC7_WIDTH, embedding_gain, rng);
        let bn7 = BatchNorm::new(store, "fc7.bn", FC7_WIDTH);
        let fc8 = Linear::new(store, "fc8", FC7_WIDTH, n_classes, 1.0, rng);
        Ok(Self {
            convs,
            fc6,
            bn6,
            fc7,
            bn7,
            fc8,
        })
    }

    pub(crate) fn head_prefixes() -> &'static [&'static str] {
        &["fc8."]
    }

    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<NetOutput> {
        let mut h = x;
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            h = conv.forward(g, store, h)?;
            h = bn.forward(g, store, h, mode)?;
            h = g.relu(h);
            if i < 2 {
                h = g.max_pool2d(h, (3, 3), (2, 2), (0, 0))?;
            }
        }
        h = g.max_pool2d(h, (5, 3), (3, 2), (0, 0))?;
        h = self.fc6.forward(g, store, h)?;
        h = self.bn6.forward(g, store, h, mode)?;
        h = g.relu(h);
        // apool6: average over the remaining time axis, then any leftover height.
        h = g.mean_axis(h, 3)?;
        if g.shape(h)[2] > 1 {
            h = g.mean_axis(h, 2)?;
        } else {
            let n = g.shape(h)[0];
            h = g.reshape(h, &[n, FC6_WIDTH])?;
        }
        let embedding = self.fc7.forward(g, store, h)?;
        let mut y = self.bn7.forward(g, store, embedding, mode)?;
        y = g.relu(y);
        let logits = self.fc8.forward(g, store, y)?;
        Ok(NetOutput {
            embedding,
            logits: Some(logits),
            capsules: None,
            autoencoder: None,
        })
    }
}
