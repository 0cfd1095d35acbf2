//! Embedding backbones: VGG-M, ResNet-34, CapsuleNet-M and CapsuleNet-MA.

pub mod autoencoder;
pub mod capsule;
mod capsnet;
mod resnet;
mod vgg;

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Spectrogram, SPECTROGRAM_BINS};
use crate::datasets::SpeakerLabel;
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, CheckpointMeta, Graph, Mode, ParamId, ParamStore, Tensor, Var};

pub use autoencoder::{contractive_penalty, jacobian_frobenius_sq, reconstruction_loss, ContractiveTerms};
pub use capsule::{
    dynamic_routing, dynamic_routing_backward, margin_loss, margin_loss_batch, squash, squash_backward,
    CapsuleActivations, MarginLossParams, RoutingTrace,
};

use capsnet::{CapsNetM, CapsNetMa};
use resnet::ResNet34;
use vgg::VggM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    VggM,
    Resnet34,
    CapsnetM,
    CapsnetMa,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::VggM, Arch::Resnet34, Arch::CapsnetM, Arch::CapsnetMa];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::VggM => "vgg_m",
            Arch::Resnet34 => "resnet34",
            Arch::CapsnetM => "capsnet_m",
            Arch::CapsnetMa => "capsnet_ma",
        }
    }

    pub fn is_capsule(self) -> bool {
        matches!(self, Arch::CapsnetM | Arch::CapsnetMa)
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown architecture {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CapsuleConfig {
    pub primary_capsule_dim: usize,
    pub class_capsule_dim: usize,
    pub routing_iters: usize,
    pub conv_stride: usize,
    pub primary_stride: usize,
    pub conv_channels: usize,
    pub primary_channels: usize,
    pub kernel_size: usize,
}

impl Default for CapsuleConfig {
    fn default() -> Self {
        Self {
            primary_capsule_dim: 8,
            class_capsule_dim: 16,
            routing_iters: 3,
            conv_stride: 6,
            primary_stride: 6,
            conv_channels: 256,
            primary_channels: 32,
            kernel_size: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub hidden_dims: Vec<usize>,
    pub contractive_weight: f64,
    pub recon_weight: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![512],
            contractive_weight: 1e-4,
            recon_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_classes: usize,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub capsule: CapsuleConfig,
    #[serde(default)]
    pub autoencoder: AutoencoderConfig,
    #[serde(default = "default_bins")]
    pub input_bins: usize,
    #[serde(default = "default_frames")]
    pub input_frames: usize,
    /// Init gain of the layer whose output is the few-shot embedding.
    #[serde(default = "default_embedding_gain")]
    pub embedding_gain: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_embedding_dim() -> usize {
    256
}

fn default_bins() -> usize {
    SPECTROGRAM_BINS
}

fn default_frames() -> usize {
    300
}

fn default_embedding_gain() -> f64 {
    0.01
}

impl ModelConfig {
    pub fn new(arch: Arch, n_classes: usize) -> Self {
        Self {
            arch,
            n_classes,
            embedding_dim: default_embedding_dim(),
            capsule: CapsuleConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            input_bins: default_bins(),
            input_frames: default_frames(),
            embedding_gain: default_embedding_gain(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.capsule;
        let dims = [
            c.primary_capsule_dim,
            c.class_capsule_dim,
            c.conv_stride,
            c.primary_stride,
            c.conv_channels,
            c.primary_channels,
            c.kernel_size,
            self.embedding_dim,
            self.input_bins,
            self.input_frames,
        ];
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig(format!("n_classes must be at least 2, got {}", self.n_classes)));
        }
        if c.routing_iters < 1 {
            return Err(Error::InvalidConfig("routing_iters must be at least 1".into()));
        }
        if dims.contains(&0) || self.autoencoder.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.autoencoder.hidden_dims.len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "the autoencoder supports exactly one hidden layer, got {:?}",
                self.autoencoder.hidden_dims
            )));
        }
        if !(self.embedding_gain > 0.0 && self.embedding_gain.is_finite()) {
            return Err(Error::InvalidConfig("embedding_gain must be positive".into()));
        }
        if self.autoencoder.contractive_weight < 0.0 || self.autoencoder.recon_weight < 0.0 {
            return Err(Error::InvalidConfig("autoencoder loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Width of the vector returned by [`Model::embed`].
    pub fn embedding_width(&self) -> usize {
        match self.arch {
            Arch::VggM => 1024,
            Arch::Resnet34 => 512,
            Arch::CapsnetM => self.n_classes * self.capsule.class_capsule_dim,
            Arch::CapsnetMa => self.embedding_dim,
        }
    }
}

/// Embeddings of a batch, one row per input.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub vectors: Array2<f64>,
    pub source_labels: Option<Vec<SpeakerLabel>>,
}

impl EmbeddingBatch {
    pub fn new(vectors: Array2<f64>) -> Self {
        Self {
            vectors,
            source_labels: None,
        }
    }

    pub fn with_labels(vectors: Array2<f64>, labels: Vec<SpeakerLabel>) -> Result<Self> {
        if labels.len() != vectors.nrows() {
            return Err(Error::ShapeMismatch(format!("{} embeddings, {} labels", vectors.nrows(), labels.len())));
        }
        Ok(Self {
            vectors,
            source_labels: Some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Graph handles of the CapsuleNet-MA autoencoder.
#[derive(Debug, Clone, Copy)]
pub struct AutoencoderVars {
    /// Flattened class capsules.
    pub z: Var,
    /// Encoder hidden pre-activation.
    pub pre: Var,
    pub reconstruction: Var,
    pub enc_w1: Var,
    pub enc_w2: Var,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct NetOutput {
    pub embedding: Var,
    /// Classifier logits (VGG-M, ResNet-34).
    pub logits: Option<Var>,
    /// Class capsules `[N, C, D]` (capsule networks).
    pub capsules: Option<Var>,
    pub autoencoder: Option<AutoencoderVars>,
}

#[derive(Debug, Clone)]
enum Network {
    Vgg(VggM),
    Resnet(ResNet34),
    Caps(CapsNetM),
    CapsMa(CapsNetMa),
}

/// Output of a single-input forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Logits, or class capsule norms for capsule networks.
    pub scores: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// CapsuleNet-MA outputs for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct MaEmbedding {
    pub embedding: Vec<f64>,
    pub recon_loss: f64,
    pub contractive_penalty: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    net: Network,
}

const EVAL_CHUNK: usize = 16;

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (bins, frames, n) = (config.input_bins, config.input_frames, config.n_classes);
        let net = match config.arch {
            Arch::VggM => Network::Vgg(VggM::new(&mut params, bins, n, config.embedding_gain, &mut rng)?),
            Arch::Resnet34 => Network::Resnet(ResNet34::new(&mut params, bins, n, config.embedding_gain, &mut rng)?),
            Arch::CapsnetM => Network::Caps(CapsNetM::new(
                &mut params,
                &config.capsule,
                bins,
                frames,
                n,
                config.embedding_gain,
                &mut rng,
            )?),
            Arch::CapsnetMa => Network::CapsMa(CapsNetMa::new(
                &mut params,
                &config.capsule,
                &config.autoencoder,
                bins,
                frames,
                n,
                config.embedding_dim,
                config.embedding_gain,
                &mut rng,
            )?),
        };
        Ok(Self { config, params, net })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Trainable scalars, including biases and batch-norm affine terms.
    pub fn count_parameters(&self) -> usize {
        self.params.count_trainable()
    }

    /// Name prefixes of the parameters that depend on `n_classes`.
    pub fn head_prefixes(&self) -> &'static [&'static str] {
        match self.net {
            Network::Vgg(_) => VggM::head_prefixes(),
            Network::Resnet(_) => ResNet34::head_prefixes(),
            Network::Caps(_) => CapsNetM::head_prefixes(),
            Network::CapsMa(_) => CapsNetMa::head_prefixes(),
        }
    }

    pub fn is_head_param(&self, name: &str) -> bool {
        self.head_prefixes().iter().any(|p| name.starts_with(p) || name == p.trim_end_matches('.'))
    }

    /// Freezes every parameter whose name starts with `prefix`; returns the
    /// number of scalars removed from [`Model::count_parameters`].
    pub fn freeze(&mut self, prefix: &str) -> usize {
        self.params.freeze(prefix)
    }

    pub fn unfreeze(&mut self, prefix: &str) -> usize {
        self.params.unfreeze(prefix)
    }

    /// Freezes everything outside the class-dependent head.
    pub fn freeze_backbone(&mut self) -> usize {
        let names: Vec<String> = self
            .params
            .iter()
            .filter(|(_, p)| !self.is_head_param(&p.name))
            .map(|(_, p)| p.name.clone())
            .collect();
        names.iter().map(|n| self.params.freeze(n)).sum()
    }

    /// Stacks spectrograms into a `[N, 1, bins, frames]` input tensor.
    pub fn input_tensor(&self, specs: &[&Spectrogram]) -> Result<Tensor> {
        let first = specs.first().ok_or(Error::EmptyInput)?;
        let (bins, frames) = first.shape();
        if bins != self.config.input_bins {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} frequency bins, got {bins}",
                self.config.input_bins
            )));
        }
        if self.config.arch.is_capsule() && frames != self.config.input_frames {
            return Err(Error::ShapeMismatch(format!(
                "capsule model expects {} frames, got {frames}",
                self.config.input_frames
            )));
        }
        let mut data = Vec::with_capacity(specs.len() * bins * frames);
        for s in specs {
            if s.shape() != (bins, frames) {
                return Err(Error::ShapeMismatch(format!("mixed input shapes {:?} and {:?}", (bins, frames), s.shape())));
            }
            if !s.normalized {
                return Err(Error::InvalidConfig("model input must be a normalized spectrogram".into()));
            }
            data.extend(s.values.iter());
        }
        Tensor::from_vec(&[specs.len(), 1, bins, frames], data)
    }

    /// Records the forward pass of `x: [N, 1, bins, frames]` on `g`.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<NetOutput> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.config.input_bins {
            return Err(Error::ShapeMismatch(format!(
                "expected [N, 1, {}, frames] input, got {shape:?}",
                self.config.input_bins
            )));
        }
        let out = match &self.net {
            Network::Vgg(n) => n.forward(g, &self.params, x, mode)?,
            Network::Resnet(n) => n.forward(g, &self.params, x, mode)?,
            Network::Caps(n) => n.forward(g, &self.params, x)?,
            Network::CapsMa(n) => n.forward(g, &self.params, x)?,
        };
        if let Some(pos) = g.value(out.embedding).data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation {
                stage: format!("{} embedding", self.config.arch),
                detail: format!("element {pos} is not finite"),
            });
        }
        Ok(out)
    }

    /// Writes batch-norm running statistics recorded during a training pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, t) in updates {
            self.params.replace(id, t);
        }
    }

    fn eval_chunks<T>(
        &self,
        specs: &[&Spectrogram],
        mut f: impl FnMut(&Graph, &NetOutput) -> Result<T>,
    ) -> Result<Vec<T>> {
        let mut out = Vec::new();
        for chunk in specs.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let x = g.input(self.input_tensor(chunk)?);
            let o = self.forward(&mut g, x, Mode::Eval)?;
            out.push(f(&g, &o)?);
        }
        Ok(out)
    }

    /// Evaluation-mode embeddings, one row per spectrogram.
    pub fn embed(&self, specs: &[&Spectrogram]) -> Result<EmbeddingBatch> {
        if specs.is_empty() {
            return Err(Error::EmptyInput);
        }
        let width = self.config.embedding_width();
        let parts = self.eval_chunks(specs, |g, o| Ok(g.value(o.embedding).to_f64()))?;
        let flat: Vec<f64> = parts.into_iter().flatten().collect();
        Ok(EmbeddingBatch::new(
            Array2::from_shape_vec((specs.len(), width), flat).map_err(|e| Error::ShapeMismatch(e.to_string()))?,
        ))
    }

    /// Evaluation-mode class scores: logits, or capsule norms.
    pub fn scores(&self, specs: &[&Spectrogram]) -> Result<Array2<f64>> {
        if specs.is_empty() {
            return Err(Error::EmptyInput);
        }
        let parts = self.eval_chunks(specs, |g, o| scores_of(g, o))?;
        let flat: Vec<f64> = parts.into_iter().flat_map(|a| a.into_iter()).collect();
        Array2::from_shape_vec((specs.len(), self.config.n_classes), flat).map_err(|e| Error::ShapeMismatch(e.to_string()))
    }

    pub fn predict(&self, spec: &Spectrogram) -> Result<Prediction> {
        let mut res = self.eval_chunks(&[spec], |g, o| {
            Ok(Prediction {
                scores: scores_of(g, o)?.into_iter().collect(),
                embedding: g.value(o.embedding).to_f64(),
            })
        })?;
        Ok(res.remove(0))
    }

    /// Class capsules of one input (capsule networks only).
    pub fn capsule_activations(&self, spec: &Spectrogram) -> Result<CapsuleActivations> {
        if !self.config.arch.is_capsule() {
            return Err(Error::InvalidConfig(format!("{} has no capsules", self.config.arch)));
        }
        let d = self.config.capsule.class_capsule_dim;
        let n = self.config.n_classes;
        let mut res = self.eval_chunks(&[spec], |g, o| {
            let v = g.value(o.capsules.expect("capsule network"));
            Ok(Array2::from_shape_vec((n, d), v.to_f64()).expect("capsule shape"))
        })?;
        Ok(CapsuleActivations {
            class_vectors: res.remove(0),
        })
    }

    /// Embedding, reconstruction loss and contractive penalty of one input.
    pub fn capsnet_ma_embed(&self, spec: &Spectrogram) -> Result<MaEmbedding> {
        if self.config.arch != Arch::CapsnetMa {
            return Err(Error::InvalidConfig(format!("{} has no autoencoder", self.config.arch)));
        }
        let mut res = self.eval_chunks(&[spec], |g, o| {
            let ae = o.autoencoder.expect("autoencoder");
            let z = autoencoder::to_array2(g.value(ae.z))?;
            let zh = autoencoder::to_array2(g.value(ae.reconstruction))?;
            let (recon_loss, _, _) = reconstruction_loss(z.view(), zh.view())?;
            let terms = contractive_penalty(
                autoencoder::to_array2(g.value(ae.pre))?.view(),
                autoencoder::to_array2(g.value(ae.enc_w1))?.view(),
                autoencoder::to_array2(g.value(ae.enc_w2))?.view(),
            )?;
            Ok(MaEmbedding {
                embedding: g.value(o.embedding).to_f64(),
                recon_loss,
                contractive_penalty: terms.value,
            })
        })?;
        Ok(res.remove(0))
    }

    /// A copy of this model whose class-dependent head is re-initialized for
    /// `n_classes`; every other tensor is copied bitwise.
    pub fn replace_head(&self, n_classes: usize, seed: u64) -> Result<Model> {
        let mut config = self.config.clone();
        config.n_classes = n_classes;
        config.seed = seed;
        let mut fresh = Model::new(config)?;
        let names: Vec<String> = fresh.params.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            if fresh.is_head_param(&name) {
                continue;
            }
            let src = self
                .params
                .id_of(&name)
                .ok_or_else(|| Error::CheckpointIncompatible(format!("source model lacks {name}")))?;
            let dst = fresh.params.id_of(&name).expect("listed above");
            fresh
                .params
                .set(dst, self.params.get(src).clone())
                .map_err(|e| Error::CheckpointIncompatible(e.to_string()))?;
        }
        Ok(fresh)
    }

    pub fn checkpoint(&self, meta: CheckpointMeta) -> Result<Checkpoint> {
        Ok(Checkpoint::capture(&self.params, serde_json::to_value(&self.config)?, meta))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        let config: ModelConfig = serde_json::from_value(ckpt.model_config.clone())
            .map_err(|e| Error::CheckpointIncompatible(format!("model config: {e}")))?;
        let mut model = Model::new(config)?;
        ckpt.restore_into(&mut model.params)?;
        for t in &ckpt.tensors {
            if !t.trainable {
                model.params.freeze(&t.name);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: CheckpointMeta) -> Result<()> {
        self.checkpoint(meta)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
        let ckpt = Checkpoint::load(path)?;
        Ok((Model::from_checkpoint(&ckpt)?, ckpt.meta))
    }
}

fn scores_of(g: &Graph, o: &NetOutput) -> Result<Array2<f64>> {
    match (o.logits, o.capsules) {
        (Some(l), _) => autoencoder::to_array2(g.value(l)),
        (None, Some(c)) => capsule::capsule_norms(g.value(c)),
        (None, None) => Err(Error::InvalidConfig("network produced no class scores".into())),
    }
}

fn require_arch(model: &Model, arch: Arch) -> Result<()> {
    if model.arch() != arch {
        return Err(Error::ConfigMismatch(format!("expected a {arch} model, got {}", model.arch())));
    }
    Ok(())
}

/// VGG-M logits and its 1024-d fc7 embedding.
pub fn forward_vgg_m(model: &Model, spec: &Spectrogram) -> Result<Prediction> {
    require_arch(model, Arch::VggM)?;
    model.predict(spec)
}

/// ResNet-34 logits and its time-pooled 512-d fc1 embedding.
pub fn forward_resnet34(model: &Model, spec: &Spectrogram) -> Result<Prediction> {
    require_arch(model, Arch::Resnet34)?;
    model.predict(spec)
}

pub fn forward_capsnet_m(model: &Model, spec: &Spectrogram) -> Result<CapsuleActivations> {
    require_arch(model, Arch::CapsnetM)?;
    model.capsule_activations(spec)
}

pub fn capsnet_ma_embed(model: &Model, spec: &Spectrogram) -> Result<MaEmbedding> {
    model.capsnet_ma_embed(spec)
}
