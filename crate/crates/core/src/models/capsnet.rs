use rand::Rng;

use super::capsule::{predict_node, primary_capsules_node, routing_node, squash_node};
use super::{AutoencoderConfig, AutoencoderVars, CapsuleConfig, NetOutput};
use crate::error::{Error, Result};
use crate::nn::{he_normal, Conv2d, ConvSpec, Graph, Linear, ParamId, ParamKind, ParamStore, Var};

#[derive(Debug, Clone)]
pub(crate) struct CapsNetM {
    conv1: Conv2d,
    primary: Conv2d,
    routing_weight: ParamId,
    caps: CapsuleConfig,
    n_classes: usize,
}

fn out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    len.checked_sub(kernel).map(|v| v / stride + 1)
}

/// Number of primary capsules produced from a `bins x frames` input.
pub(crate) fn primary_capsule_count(caps: &CapsuleConfig, bins: usize, frames: usize) -> Option<usize> {
    let k = caps.kernel_size;
    let h = out_len(out_len(bins, k, caps.conv_stride)?, k, caps.primary_stride)?;
    let w = out_len(out_len(frames, k, caps.conv_stride)?, k, caps.primary_stride)?;
    Some(caps.primary_channels * h * w)
}

impl CapsNetM {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        caps: &CapsuleConfig,
        bins: usize,
        frames: usize,
        n_classes: usize,
        routing_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n_in = primary_capsule_count(caps, bins, frames)
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidConfig(format!("{bins}x{frames} input is too small for the capsule layers")))?;
        let k = caps.kernel_size;
        let conv1 = Conv2d::new(
            store,
            "conv1",
            ConvSpec::new(1, caps.conv_channels, (k, k)).stride((caps.conv_stride, caps.conv_stride)),
            1.0,
            rng,
        );
        let primary = Conv2d::new(
            store,
            "primary",
            ConvSpec::new(
                caps.conv_channels,
                caps.primary_channels * caps.primary_capsule_dim,
                (k, k),
            )
            .stride((caps.primary_stride, caps.primary_stride)),
            1.0,
            rng,
        );
        let shape = [n_in, n_classes, caps.class_capsule_dim, caps.primary_capsule_dim];
        let routing_weight = store.add(
            "routing.weight",
            ParamKind::Weight,
            he_normal(&shape, caps.primary_capsule_dim, routing_gain, rng),
        );
        Ok(Self {
            conv1,
            primary,
            routing_weight,
            caps: caps.clone(),
            n_classes,
        })
    }

    pub(crate) fn head_prefixes() -> &'static [&'static str] {
        &["routing."]
    }

    pub(crate) fn class_dim(&self) -> usize {
        self.n_classes * self.caps.class_capsule_dim
    }

    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<NetOutput> {
        let mut h = self.conv1.forward(g, store, x)?;
        h = g.relu(h);
        h = self.primary.forward(g, store, h)?;
        let u = primary_capsules_node(g, h, self.caps.primary_capsule_dim)?;
        let u = squash_node(g, u)?;
        let w = g.param(store, self.routing_weight);
        let u_hat = predict_node(g, u, w)?;
        let v = routing_node(g, u_hat, self.caps.routing_iters)?;
        let n = g.shape(v)[0];
        let embedding = g.reshape(v, &[n, self.class_dim()])?;
        Ok(NetOutput {
            embedding,
            logits: None,
            capsules: Some(v),
            autoencoder: None,
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct CapsNetMa {
    pub(crate) capsnet: CapsNetM,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
}

impl CapsNetMa {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        caps: &CapsuleConfig,
        ae: &AutoencoderConfig,
        bins: usize,
        frames: usize,
        n_classes: usize,
        embedding_dim: usize,
        embedding_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let capsnet = CapsNetM::new(store, caps, bins, frames, n_classes, 1.0, rng)?;
        let z = capsnet.class_dim();
        let hidden = ae.hidden_dims[0];
        let enc1 = Linear::new(store, "encoder.0", z, hidden, 1.0, rng);
        let enc2 = Linear::new(store, "encoder.1", hidden, embedding_dim, embedding_gain, rng);
        let dec1 = Linear::new(store, "decoder.0", embedding_dim, hidden, 1.0, rng);
        let dec2 = Linear::new(store, "decoder.1", hidden, z, 1.0, rng);
        Ok(Self {
            capsnet,
            enc1,
            enc2,
            dec1,
            dec2,
        })
    }

    pub(crate) fn head_prefixes() -> &'static [&'static str] {
        &["routing.", "encoder.0.", "decoder.1."]
    }

    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<NetOutput> {
        let caps = self.capsnet.forward(g, store, x)?;
        let z = caps.embedding;
        let pre = self.enc1.forward(g, store, z)?;
        let a = g.tanh(pre);
        let h = self.enc2.forward(g, store, a)?;
        let d = self.dec1.forward(g, store, h)?;
        let d = g.tanh(d);
        let reconstruction = self.dec2.forward(g, store, d)?;
        let enc_w1 = g.param(store, self.enc1.weight);
        let enc_w2 = g.param(store, self.enc2.weight);
        Ok(NetOutput {
            embedding: h,
            logits: None,
            capsules: caps.capsules,
            autoencoder: Some(AutoencoderVars {
                z,
                pre,
                reconstruction,
                enc_w1,
                enc_w2,
            }),
        })
    }
}
