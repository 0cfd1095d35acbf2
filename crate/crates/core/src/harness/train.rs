use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::config::{LossKind, TrainConfig};
use super::metrics::topk_accuracy;
use super::record::{ExperimentRecord, GridCell, Metrics};
use crate::audio::Spectrogram;
use crate::datasets::{sample_episode_indices, SpectrogramPool};
use crate::error::{Error, Result};
use crate::fewshot::{episode_rng, evaluate_few_shot, prototypical_loss_node, EvalConfig, FewShotReport, Role};
use crate::models::autoencoder::{contractive_node, reconstruction_node};
use crate::models::capsule::{margin_loss_node, MarginLossParams};
use crate::models::{Model, ModelConfig};
use crate::nn::{Checkpoint, CheckpointMeta, Graph, Mode, Optimizer, Var};

const VALIDATION_STREAM: u64 = 0x7A11_DA7E;

/// Finished classifier training.
#[derive(Debug, Clone)]
pub struct ClassifierRun {
    pub model: Model,
    pub record: ExperimentRecord,
    pub losses: Vec<f64>,
    pub train_top1: f64,
}

/// Finished episodic training.
#[derive(Debug, Clone)]
pub struct EpisodicRun {
    pub model: Model,
    pub record: ExperimentRecord,
    /// Prototypical loss of the first training episode.
    pub initial_loss: Option<f64>,
    pub losses: Vec<f64>,
    /// `(steps taken, validation accuracy)` in evaluation order.
    pub validation: Vec<(usize, f64)>,
    pub best_step: usize,
    pub steps: usize,
}

fn divergence(model: &Model, cfg: &TrainConfig, step: usize, loss: f64) -> Error {
    let meta = CheckpointMeta {
        step: step as u64,
        seed: cfg.seed,
        tag: "last_good".into(),
    };
    Error::DivergenceDetected {
        step,
        loss,
        last_good: model.checkpoint(meta).ok().map(Box::new),
    }
}

/// Non-finite activations during training count as divergence.
fn as_divergence(err: Error, model: &Model, cfg: &TrainConfig, step: usize) -> Error {
    match err {
        Error::NonFiniteActivation { .. } => divergence(model, cfg, step, f64::NAN),
        other => other,
    }
}

fn dense_targets(model: &Model, pool: &SpectrogramPool) -> Result<Vec<usize>> {
    let n = model.config().n_classes;
    let speakers = pool.n_speakers();
    if speakers != n {
        return Err(Error::ConfigMismatch(format!("model has {n} classes, data has {speakers} speakers")));
    }
    let t = pool.targets();
    if let Some(bad) = t.iter().find(|&&y| y >= n) {
        return Err(Error::ConfigMismatch(format!("speaker index {bad} outside {n} classes")));
    }
    Ok(t)
}

/// One optimizer update from a recorded loss; errors leave the model untouched.
fn apply_step(
    model: &mut Model,
    opt: &mut Optimizer,
    g: &mut Graph,
    loss: Var,
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(divergence(model, cfg, step, value));
    }
    let grads = g.backward(loss)?;
    if grads.params().any(|(_, t)| !t.all_finite()) {
        return Err(divergence(model, cfg, step, value));
    }
    opt.step(model.params_mut(), &grads);
    let updates = g.take_buffer_updates();
    model.apply_buffer_updates(updates);
    Ok(value)
}

fn classification_loss(model: &Model, g: &mut Graph, x: Var, targets: &[usize], loss: LossKind) -> Result<Var> {
    let out = model.forward(g, x, Mode::Train)?;
    match (loss, out.logits, out.capsules) {
        (LossKind::CrossEntropy, Some(l), _) => crate::nn::loss::cross_entropy(g, l, targets),
        (LossKind::Margin, _, Some(v)) => margin_loss_node(g, v, targets, &MarginLossParams::default()),
        _ => Err(Error::ConfigMismatch(format!("loss {} does not apply to {}", loss.as_str(), model.arch()))),
    }
}

/// Top-1 and top-`min(5, C)` accuracy in evaluation mode.
pub fn evaluate_classifier(model: &Model, pool: &SpectrogramPool) -> Result<(f64, f64)> {
    let targets = dense_targets(model, pool)?;
    let specs: Vec<&Spectrogram> = pool.items.iter().collect();
    let scores = model.scores(&specs)?;
    let k5 = 5.min(model.config().n_classes);
    Ok((topk_accuracy(scores.view(), &targets, 1)?, topk_accuracy(scores.view(), &targets, k5)?))
}

fn snapshot(cfg: &TrainConfig, model: &ModelConfig) -> serde_json::Value {
    json!({ "train": cfg, "model": model })
}

/// Supervised training with cross-entropy (VGG-M, ResNet-34) or margin
/// loss (capsule networks). The batch order is a pure function of the seed.
pub fn train_classifier(
    cfg: &TrainConfig,
    mut model: Model,
    train: &SpectrogramPool,
    test: Option<&SpectrogramPool>,
    dataset: &str,
) -> Result<ClassifierRun> {
    cfg.validate()?;
    if !matches!(cfg.loss, LossKind::CrossEntropy | LossKind::Margin) {
        return Err(Error::ConfigMismatch(format!("{} is not a classification loss", cfg.loss.as_str())));
    }
    let targets = dense_targets(&model, train)?;
    if let Some(t) = test {
        dense_targets(&model, t)?;
    }
    let started = Instant::now();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut losses = Vec::new();
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut episode_rng(cfg.seed, epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            if losses.len() >= budget {
                break 'epochs;
            }
            let specs: Vec<&Spectrogram> = batch.iter().map(|&i| &train.items[i]).collect();
            let y: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let mut g = Graph::new();
            let x = g.input(model.input_tensor(&specs)?);
            let step = losses.len();
            let loss = classification_loss(&model, &mut g, x, &y, cfg.loss).map_err(|e| as_divergence(e, &model, cfg, step))?;
            losses.push(apply_step(&mut model, &mut opt, &mut g, loss, cfg, losses.len())?);
        }
    }
    let (train_top1, _) = evaluate_classifier(&model, train)?;
    let (top1, top5) = match test {
        Some(t) => evaluate_classifier(&model, t).map(|(a, b)| (Some(a), Some(b)))?,
        None => (None, None),
    };
    let record = ExperimentRecord {
        experiment_tag: "classifier".into(),
        arch: model.arch().to_string(),
        dataset: dataset.into(),
        samples_per_class: None,
        metrics: Metrics {
            top1,
            top5,
            fewshot: Vec::new(),
        },
        parameter_count: model.count_parameters(),
        wall_time_s: started.elapsed().as_secs_f64(),
        config: snapshot(cfg, model.config()),
    };
    Ok(ClassifierRun {
        model,
        record,
        losses,
        train_top1,
    })
}

/// Loss of one training episode; returns the total and the prototypical part.
fn episode_loss(
    cfg: &TrainConfig,
    model: &Model,
    g: &mut Graph,
    pool: &SpectrogramPool,
    step: usize,
) -> Result<(Var, f64)> {
    let e = &cfg.episodic;
    let ep = sample_episode_indices(&pool.episode_pool(), e.n_way, e.k_shot, e.n_query, &mut episode_rng(cfg.seed, step as u64))?;
    let rows: Vec<(usize, Role)> = ep
        .support
        .iter()
        .map(|&(i, c)| (i, Role::Support(c)))
        .chain(ep.query.iter().map(|&(i, c)| (i, Role::Query(c))))
        .collect();
    let specs: Vec<&Spectrogram> = rows.iter().map(|&(i, _)| &pool.items[i]).collect();
    let roles: Vec<Role> = rows.iter().map(|&(_, r)| r).collect();
    let x = g.input(model.input_tensor(&specs)?);
    let out = model.forward(g, x, Mode::Train)?;
    let (proto, result) = prototypical_loss_node(g, out.embedding, &roles, e.n_way, e.distance)?;
    if cfg.loss != LossKind::CapsmaComposite {
        return Ok((proto, result.loss));
    }
    let w = cfg.composite_weights;
    let ae = out
        .autoencoder
        .ok_or_else(|| Error::ConfigMismatch(format!("capsma_composite needs capsnet_ma, got {}", model.arch())))?;
    let recon = reconstruction_node(g, ae.z, ae.reconstruction)?;
    let contractive = contractive_node(g, ae.pre, ae.enc_w1, ae.enc_w2)?;
    let mut total = g.scale(proto, w.proto as f32);
    let recon = g.scale(recon, w.recon as f32);
    total = g.add(total, recon)?;
    let contractive = g.scale(contractive, w.contractive as f32);
    total = g.add(total, contractive)?;
    if w.margin {
        let targets: Vec<usize> = rows.iter().map(|&(i, _)| pool.labels[i].index).collect();
        let n = model.config().n_classes;
        if targets.iter().any(|&t| t >= n) {
            return Err(Error::ConfigMismatch(format!("margin term needs speaker indices below {n}")));
        }
        let margin = margin_loss_node(g, out.capsules.expect("capsule network"), &targets, &MarginLossParams::default())?;
        total = g.add(total, margin)?;
    }
    Ok((total, result.loss))
}

fn validation_config(cfg: &TrainConfig) -> EvalConfig {
    let e = &cfg.episodic;
    EvalConfig {
        n_way: e.n_way,
        k_shot: e.k_shot,
        n_query: e.n_query,
        n_episodes: e.val_episodes,
        seed: cfg.seed ^ VALIDATION_STREAM,
        distance: e.distance,
    }
}

/// Prototypical (or CapsuleNet-MA composite) training over sampled episodes.
///
/// Validation runs every `eval_every` steps on `val`, or on a separately
/// seeded episode stream over `train` when `val` is `None`. The parameters
/// with the best validation accuracy are restored at the end.
pub fn episodic_train(
    cfg: &TrainConfig,
    mut model: Model,
    train: &SpectrogramPool,
    val: Option<&SpectrogramPool>,
    dataset: &str,
) -> Result<EpisodicRun> {
    cfg.validate()?;
    if !cfg.loss.is_episodic() {
        return Err(Error::ConfigMismatch(format!("{} is not an episodic loss", cfg.loss.as_str())));
    }
    let e = cfg.episodic;
    train.episode_pool().check_supports(e.n_way, e.k_shot, e.n_query)?;
    let val_pool = val.unwrap_or(train);
    let vcfg = validation_config(cfg);
    val_pool.episode_pool().check_supports(vcfg.n_way, vcfg.k_shot, vcfg.n_query)?;

    let started = Instant::now();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut losses = Vec::new();
    let mut initial_loss = None;
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, crate::nn::ParamStore)> = None;
    let mut stale = 0usize;
    let mut steps = 0usize;
    if e.max_steps > 0 {
        let acc = evaluate_few_shot(&model, val_pool, &vcfg)?.mean_acc;
        validation.push((0, acc));
        best = Some((acc, 0, model.params().clone()));
    }
    while steps < e.max_steps {
        let mut g = Graph::new();
        let (loss, proto) = episode_loss(cfg, &model, &mut g, train, steps).map_err(|e| as_divergence(e, &model, cfg, steps))?;
        initial_loss.get_or_insert(proto);
        losses.push(apply_step(&mut model, &mut opt, &mut g, loss, cfg, steps)?);
        steps += 1;
        if steps % e.eval_every == 0 || steps == e.max_steps {
            let acc = evaluate_few_shot(&model, val_pool, &vcfg)
                .map_err(|e| as_divergence(e, &model, cfg, steps))?
                .mean_acc;
            validation.push((steps, acc));
            match &best {
                Some((b, _, _)) if acc <= *b => stale += 1,
                _ => {
                    best = Some((acc, steps, model.params().clone()));
                    stale = 0;
                }
            }
            if e.patience > 0 && stale >= e.patience {
                break;
            }
        }
    }
    let (best_acc, best_step) = match best {
        Some((acc, step, params)) => {
            *model.params_mut() = params;
            (Some(acc), step)
        }
        None => (None, 0),
    };
    let record = ExperimentRecord {
        experiment_tag: "episodic".into(),
        arch: model.arch().to_string(),
        dataset: dataset.into(),
        samples_per_class: None,
        metrics: Metrics {
            top1: None,
            top5: None,
            fewshot: best_acc
                .map(|acc| GridCell {
                    n_way: vcfg.n_way,
                    k_shot: vcfg.k_shot,
                    n_episodes: vcfg.n_episodes,
                    mean_acc: acc,
                    ci95: 0.0,
                })
                .into_iter()
                .collect(),
        },
        parameter_count: model.count_parameters(),
        wall_time_s: started.elapsed().as_secs_f64(),
        config: snapshot(cfg, model.config()),
    };
    Ok(EpisodicRun {
        model,
        record,
        initial_loss,
        losses,
        validation,
        best_step,
        steps,
    })
}

/// Trains each configuration from scratch on `n` items per speaker for every
/// `n` in `counts`, recording test accuracy.
pub fn limited_samples_sweep(
    models: &[ModelConfig],
    train: &SpectrogramPool,
    test: &SpectrogramPool,
    counts: &[usize],
    cfg: &TrainConfig,
    dataset: &str,
) -> Result<Vec<ExperimentRecord>> {
    let mut records = Vec::new();
    for &n in counts {
        let subset = train.subsample_per_speaker(n, cfg.seed)?;
        for mc in models {
            let run_cfg = TrainConfig {
                loss: LossKind::classifier_default(mc.arch),
                ..cfg.clone()
            };
            let mut run = train_classifier(&run_cfg, Model::new(mc.clone())?, &subset, Some(test), dataset)?;
            run.record.experiment_tag = "limited_samples".into();
            run.record.samples_per_class = Some(n);
            records.push(run.record);
        }
    }
    Ok(records)
}

/// Re-initializes the class head of a pretrained model for the target
/// speakers, then trains on the target corpus.
pub fn transfer_finetune(
    pretrained: &Checkpoint,
    train: &SpectrogramPool,
    test: Option<&SpectrogramPool>,
    cfg: &TrainConfig,
    dataset: &str,
) -> Result<ClassifierRun> {
    let source = Model::from_checkpoint(pretrained)?;
    let model = source.replace_head(train.n_speakers(), cfg.seed)?;
    let run_cfg = TrainConfig {
        loss: LossKind::classifier_default(model.arch()),
        ..cfg.clone()
    };
    let mut run = train_classifier(&run_cfg, model, train, test, dataset)?;
    run.record.experiment_tag = "transfer_finetune".into();
    Ok(run)
}

/// Few-shot evaluation of a source model on a target pool without training.
pub fn zero_finetune_eval(model: &Model, pool: &SpectrogramPool, eval: &EvalConfig) -> Result<FewShotReport> {
    evaluate_few_shot(model, pool, eval)
}

/// Few-shot grid over `ways x shots` as an experiment record.
pub fn fewshot_record(
    model: &Model,
    pool: &SpectrogramPool,
    ways: &[usize],
    shots: &[usize],
    base: &EvalConfig,
    tag: &str,
    dataset: &str,
) -> Result<ExperimentRecord> {
    let started = Instant::now();
    let grid = crate::fewshot::evaluate_grid(model, pool, ways, shots, base)?;
    Ok(ExperimentRecord {
        experiment_tag: tag.into(),
        arch: model.arch().to_string(),
        dataset: dataset.into(),
        samples_per_class: None,
        metrics: Metrics {
            top1: None,
            top5: None,
            fewshot: grid
                .into_iter()
                .map(|((n_way, k_shot), r)| GridCell {
                    n_way,
                    k_shot,
                    n_episodes: base.n_episodes,
                    mean_acc: r.mean_acc,
                    ci95: r.ci95,
                })
                .collect(),
        },
        parameter_count: model.count_parameters(),
        wall_time_s: started.elapsed().as_secs_f64(),
        config: json!({ "eval": base, "model": model.config() }),
    })
}

/// Speaker-disjoint split: `round(n * val_fraction)` speakers, at least one,
/// drawn under `seed`, form the second pool.
pub fn split_speakers(pool: &SpectrogramPool, val_fraction: f64, seed: u64) -> (SpectrogramPool, SpectrogramPool) {
    let n = pool.n_speakers();
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val: std::collections::BTreeSet<usize> = order[..n_val].iter().copied().collect();
    (
        pool.filter_speakers(|l| !val.contains(&l.index)),
        pool.filter_speakers(|l| val.contains(&l.index)),
    )
}
