use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fewshot::Distance;
use crate::models::Arch;
use crate::nn::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Margin,
    Prototypical,
    CapsmaComposite,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Margin => "margin",
            LossKind::Prototypical => "prototypical",
            LossKind::CapsmaComposite => "capsma_composite",
        }
    }

    pub fn is_episodic(self) -> bool {
        matches!(self, LossKind::Prototypical | LossKind::CapsmaComposite)
    }

    /// Classification loss used for `arch` when none is configured.
    pub fn classifier_default(arch: Arch) -> Self {
        if arch.is_capsule() {
            LossKind::Margin
        } else {
            LossKind::CrossEntropy
        }
    }

    pub fn episodic_default(arch: Arch) -> Self {
        if arch == Arch::CapsnetMa {
            LossKind::CapsmaComposite
        } else {
            LossKind::Prototypical
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            "margin" => Ok(LossKind::Margin),
            "prototypical" => Ok(LossKind::Prototypical),
            "capsma_composite" => Ok(LossKind::CapsmaComposite),
            other => Err(Error::InvalidConfig(format!("unknown loss {other:?}"))),
        }
    }
}

fn optimizer_str(k: OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::SgdMomentum => "sgd_momentum",
        OptimizerKind::Adam => "adam",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeWeights {
    pub proto: f64,
    pub recon: f64,
    pub contractive: f64,
    /// Also apply the capsule margin loss during composite training.
    pub margin: bool,
}

impl Default for CompositeWeights {
    fn default() -> Self {
        Self {
            proto: 1.0,
            recon: 0.1,
            contractive: 1e-4,
            margin: false,
        }
    }
}

/// Episode shape, validation and stopping rules of episodic training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodicSettings {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub val_episodes: usize,
    /// Evaluations without improvement before stopping; 0 disables.
    pub patience: usize,
    pub distance: Distance,
}

impl Default for EpisodicSettings {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            n_query: 5,
            max_steps: 2000,
            eval_every: 100,
            val_episodes: 100,
            patience: 5,
            distance: Distance::SqEuclidean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Caps classifier updates across all epochs; `None` runs every epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub loss: LossKind,
    pub composite_weights: CompositeWeights,
    /// Share of train items (classifier) or episodes (episodic) held out
    /// for validation when no validation split exists.
    pub val_fraction: f64,
    pub episodic: EpisodicSettings,
}

impl TrainConfig {
    /// Adam at 1e-4, batch 32, with the arch's classification loss.
    pub fn classifier(arch: Arch) -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 30,
            max_steps: None,
            seed: 0,
            loss: LossKind::classifier_default(arch),
            composite_weights: CompositeWeights::default(),
            val_fraction: 0.1,
            episodic: EpisodicSettings::default(),
        }
    }

    /// Adam at 1e-3 with the prototypical (or composite) loss.
    pub fn episodic(arch: Arch) -> Self {
        Self {
            learning_rate: 1e-3,
            loss: LossKind::episodic_default(arch),
            ..Self::classifier(arch)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        let w = &self.composite_weights;
        if [w.proto, w.recon, w.contractive].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("composite weights must be finite and non-negative".into()));
        }
        let e = &self.episodic;
        if e.n_way < 2 || e.k_shot == 0 || e.n_query == 0 {
            return Err(Error::InvalidConfig("episodes need n_way >= 2, k_shot >= 1, n_query >= 1".into()));
        }
        if e.eval_every == 0 || e.val_episodes == 0 {
            return Err(Error::InvalidConfig("eval_every and val_episodes must be positive".into()));
        }
        Ok(())
    }

    /// Sets one `key = value` pair; keys match the resolved-config output.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd_momentum" => OptimizerKind::SgdMomentum,
                    other => return Err(Error::InvalidConfig(format!("unknown optimizer {other:?}"))),
                }
            }
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "max_steps" => self.max_steps = if value == "none" { None } else { Some(num(key, value)?) },
            "seed" => self.seed = num(key, value)?,
            "loss" => self.loss = value.parse()?,
            "composite.proto" => self.composite_weights.proto = num(key, value)?,
            "composite.recon" => self.composite_weights.recon = num(key, value)?,
            "composite.contractive" => self.composite_weights.contractive = num(key, value)?,
            "composite.margin" => self.composite_weights.margin = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "episodic.n_way" => self.episodic.n_way = num(key, value)?,
            "episodic.k_shot" => self.episodic.k_shot = num(key, value)?,
            "episodic.n_query" => self.episodic.n_query = num(key, value)?,
            "episodic.max_steps" => self.episodic.max_steps = num(key, value)?,
            "episodic.eval_every" => self.episodic.eval_every = num(key, value)?,
            "episodic.val_episodes" => self.episodic.val_episodes = num(key, value)?,
            "episodic.patience" => self.episodic.patience = num(key, value)?,
            "episodic.distance" => self.episodic.distance = value.parse()?,
            other => return Err(Error::InvalidConfig(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Defaults, then each file in order, then `overrides`; later layers win.
    pub fn layered(mut self, files: &[&Path], overrides: &[(String, String)]) -> Result<Self> {
        for f in files {
            self.apply_text(&std::fs::read_to_string(f)?)?;
        }
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Every key in the form accepted by [`TrainConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let w = &self.composite_weights;
        let e = &self.episodic;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a string");
        kv("optimizer", optimizer_str(self.optimizer).into());
        kv("learning_rate", self.learning_rate.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("max_steps", self.max_steps.map_or("none".into(), |v| v.to_string()));
        kv("seed", self.seed.to_string());
        kv("loss", self.loss.as_str().into());
        kv("composite.proto", w.proto.to_string());
        kv("composite.recon", w.recon.to_string());
        kv("composite.contractive", w.contractive.to_string());
        kv("composite.margin", w.margin.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("episodic.n_way", e.n_way.to_string());
        kv("episodic.k_shot", e.k_shot.to_string());
        kv("episodic.n_query", e.n_query.to_string());
        kv("episodic.max_steps", e.max_steps.to_string());
        kv("episodic.eval_every", e.eval_every.to_string());
        kv("episodic.val_episodes", e.val_episodes.to_string());
        kv("episodic.patience", e.patience.to_string());
        kv("episodic.distance", e.distance.as_str().into());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_layering() {
        let mut cfg = TrainConfig::episodic(Arch::CapsnetMa);
        cfg.apply_text("# comment\nlearning_rate = 0.5\ncomposite.recon=0.25 # trailing\n").unwrap();
        assert_eq!(cfg.learning_rate, 0.5);
        assert_eq!(cfg.composite_weights.recon, 0.25);
        let mut back = TrainConfig::classifier(Arch::VggM);
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        let layered = cfg.layered(&[], &[("batch_size".into(), "4".into())]).unwrap();
        assert_eq!(layered.batch_size, 4);
    }

    #[test]
    fn defaults_follow_the_documented_choices() {
        let c = TrainConfig::classifier(Arch::Resnet34);
        assert_eq!((c.optimizer, c.learning_rate, c.batch_size), (OptimizerKind::Adam, 1e-4, 32));
        assert_eq!(TrainConfig::classifier(Arch::CapsnetM).loss, LossKind::Margin);
        let e = TrainConfig::episodic(Arch::CapsnetMa);
        assert_eq!((e.learning_rate, e.loss), (1e-3, LossKind::CapsmaComposite));
        assert!(!e.composite_weights.margin);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = TrainConfig::classifier(Arch::VggM);
        assert!(c.set("learning_rate", "0").is_ok());
        assert!(c.validate().is_err());
        assert!(c.set("nope", "1").is_err());
        assert!(c.apply_text("batch_size 3").is_err());
    }
}
