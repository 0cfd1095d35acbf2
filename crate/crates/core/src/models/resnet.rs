use rand::Rng;

use super::NetOutput;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, ConvSpec, Graph, Linear, Mode, ParamStore, Var};

const STAGES: [(usize, usize); 4] = [(64, 3), (128, 4), (256, 6), (512, 3)];
const WIDTH: usize = 512;

#[derive(Debug, Clone)]
pub(crate) struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let c3 = |i, o, s| ConvSpec::new(i, o, (3, 3)).stride((s, s)).padding((1, 1)).no_bias();
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c3(in_ch, out_ch, stride), 1.0, rng);
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), out_ch);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c3(out_ch, out_ch, 1), 1.0, rng);
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), out_ch);
        let downsample = (stride != 1 || in_ch != out_ch).then(|| {
            let spec = ConvSpec::new(in_ch, out_ch, (1, 1)).stride((stride, stride)).no_bias();
            (
                Conv2d::new(store, &format!("{name}.downsample"), spec, 1.0, rng),
                BatchNorm::new(store, &format!("{name}.downsample.bn"), out_ch),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        }
    }

    #[cfg(test)]
    pub(crate) fn last_conv(&self) -> &Conv2d {
        &self.conv2
    }

    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let mut h = self.conv1.forward(g, store, x)?;
        h = self.bn1.forward(g, store, h, mode)?;
        h = g.relu(h);
        h = self.conv2.forward(g, store, h)?;
        h = self.bn2.forward(g, store, h, mode)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(g, store, x)?;
                bn.forward(g, store, s, mode)?
            }
            None => x,
        };
        let sum = g.add(h, shortcut)?;
        Ok(g.relu(sum))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ResNet34 {
    conv1: Conv2d,
    bn1: BatchNorm,
    pub(crate) blocks: Vec<BasicBlock>,
    fc1: Conv2d,
    bn_fc1: BatchNorm,
    fc2: Linear,
}

fn down(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Feature-map height after the last residual stage.
pub(crate) fn final_height(bins: usize) -> Option<usize> {
    let mut h = down(bins, 7, 2, 3)?;
    h = down(h, 3, 2, 1)?;
    for _ in 1..STAGES.len() {
        h = down(h, 3, 2, 1)?;
    }
    Some(h)
}

impl ResNet34 {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        bins: usize,
        n_classes: usize,
        embedding_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let h = final_height(bins)
            .filter(|&h| h > 0)
            .ok_or_else(|| Error::InvalidConfig(format!("{bins} input bins are too few for ResNet-34")))?;
        let conv1 = Conv2d::new(
            store,
            "conv1",
            ConvSpec::new(1, 64, (7, 7)).stride((2, 2)).padding((3, 3)).no_bias(),
            1.0,
            rng,
        );
        let bn1 = BatchNorm::new(store, "conv1.bn", 64);
        let mut blocks = Vec::new();
        let mut in_ch = 64;
        for (stage, &(width, depth)) in STAGES.iter().enumerate() {
            for b in 0..depth {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let name = format!("layer{}.{b}", stage + 1);
                blocks.push(BasicBlock::new(store, &name, in_ch, width, stride, rng));
                in_ch = width;
            }
        }
        let fc1 = Conv2d::new(store, "fc1", ConvSpec::new(WIDTH, WIDTH, (h, 1)), embedding_gain, rng);
        let bn_fc1 = BatchNorm::new(store, "fc1.bn", WIDTH);
        let fc2 = Linear::new(store, "fc2", WIDTH, n_classes, 1.0, rng);
        Ok(Self {
            conv1,
            bn1,
            blocks,
            fc1,
            bn_fc1,
            fc2,
        })
    }

    pub(crate) fn head_prefixes() -> &'static [&'static str] {
        &["fc2."]
    }

    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<NetOutput> {
        let mut h = self.conv1.forward(g, store, x)?;
        h = self.bn1.forward(g, store, h, mode)?;
        h = g.relu(h);
        h = g.max_pool2d(h, (3, 3), (2, 2), (1, 1))?;
        for block in &self.blocks {
            h = block.forward(g, store, h, mode)?;
        }
        let f = self.fc1.forward(g, store, h)?;
        let n = g.shape(f)[0];
        // fc1 collapses the frequency axis, leaving [N, 512, 1, T].
        let pooled = g.mean_axis(f, 3)?;
        let embedding = g.reshape(pooled, &[n, WIDTH])?;
        let mut y = self.bn_fc1.forward(g, store, f, mode)?;
        y = g.relu(y);
        y = g.mean_axis(y, 3)?;
        y = g.reshape(y, &[n, WIDTH])?;
        let logits = self.fc2.forward(g, store, y)?;
        Ok(NetOutput {
            embedding,
            logits: Some(logits),
            capsules: None,
            autoencoder: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn zeroed_last_conv_makes_block_an_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = BasicBlock::new(&mut store, "b", 4, 4, 1, &mut rng);
        let w = block.last_conv().weight;
        let shape = store.get(w).shape().to_vec();
        store.set(w, Tensor::zeros(&shape)).unwrap();
        let x: Vec<f32> = (0..2 * 4 * 5 * 6).map(|i| ((i * 37) % 11) as f32 * 0.1).collect();
        let x = Tensor::from_vec(&[2, 4, 5, 6], x).unwrap();
        for mode in [Mode::Eval, Mode::Train] {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = block.forward(&mut g, &store, xv, mode).unwrap();
            assert_eq!(g.value(y).data(), x.data());
        }
    }

    #[test]
    fn final_height_for_128_bins() {
        assert_eq!(final_height(128), Some(4));
    }
}
