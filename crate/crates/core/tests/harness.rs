use fssr_core::audio::StftConfig;
use fssr_core::datasets::SpectrogramPool;
use fssr_core::fewshot::{evaluate_few_shot, EvalConfig};
use fssr_core::harness::{
    episodic_train, from_csv, limited_samples_sweep, render_fewshot_grid, render_sweep_svg, render_table, to_csv,
    topk_accuracy, train_classifier, transfer_finetune, ExperimentRecord, GridCell, Metrics, SyntheticConfig,
    SyntheticCorpus, TrainConfig,
};
use fssr_core::models::{Arch, Model, ModelConfig};
use fssr_core::nn::{CheckpointMeta, OptimizerKind};
use fssr_core::Error;
use ndarray::array;

fn pool(speakers: usize, utterances: usize, seed: u64) -> SpectrogramPool {
    SyntheticCorpus::new(SyntheticConfig {
        n_speakers: speakers,
        utterances_per_speaker: utterances,
        seed,
        ..Default::default()
    })
    .unwrap()
    .spectrogram_pool(&StftConfig::default())
    .unwrap()
}

fn capsnet(n: usize, seed: u64) -> Model {
    Model::new(ModelConfig::new(Arch::CapsnetM, n).with_seed(seed)).unwrap()
}

#[test]
fn topk_on_hand_ranked_batch() {
    // Row rankings: [2,0,1], [0,1,2], [1,2,0], [2,1,0]; labels 0,1,0,1.
    let logits = array![[0.5, 0.1, 0.9], [0.9, 0.5, 0.1], [0.1, 0.9, 0.5], [0.1, 0.5, 0.9]];
    let labels = [0, 1, 0, 1];
    assert_eq!(topk_accuracy(logits.view(), &labels, 2).unwrap(), 0.75);
    assert_eq!(topk_accuracy(logits.view(), &labels, 1).unwrap(), 0.0);
    assert_eq!(topk_accuracy(logits.view(), &labels, 3).unwrap(), 1.0);
    let perfect = array![[3.0, 1.0], [0.0, 2.0]];
    for k in 1..=2 {
        assert_eq!(topk_accuracy(perfect.view(), &[0, 1], k).unwrap(), 1.0);
    }
}

fn record(tag: &str, arch: &str, n: Option<usize>, top1: Option<f64>) -> ExperimentRecord {
    ExperimentRecord {
        experiment_tag: tag.into(),
        arch: arch.into(),
        dataset: "synthetic".into(),
        samples_per_class: n,
        metrics: Metrics {
            top1,
            top5: top1.map(|t| (t + 0.1).min(1.0)),
            fewshot: Vec::new(),
        },
        parameter_count: 123,
        wall_time_s: 0.1 + 0.2,
        config: serde_json::json!({"lr": 1e-4, "note": "a, \"quoted\"\nvalue"}),
    }
}

#[test]
fn reports_render_and_round_trip() {
    assert!(matches!(render_table(&[]), Err(Error::EmptyInput)));
    let one = render_table(&[record("x", "vgg_m", None, Some(0.5))]).unwrap();
    assert_eq!(one.lines().count(), 3);
    assert!(one.lines().nth(2).unwrap().contains("| 50.00 | 60.00 | 123 |"));

    let mut recs = vec![
        record("sweep, \"odd\"", "vgg_m", Some(10), Some(1.0 / 3.0)),
        record("sweep", "vgg_m", Some(20), Some(0.7)),
        record("sweep", "resnet34", Some(10), Some(1e-300)),
        record("plain", "capsnet_m", None, None),
    ];
    recs[3].metrics.fewshot = vec![GridCell {
        n_way: 5,
        k_shot: 1,
        n_episodes: 1000,
        mean_acc: 0.123456789012345,
        ci95: 0.01,
    }];
    let csv = to_csv(&recs).unwrap();
    assert_eq!(from_csv(&csv).unwrap(), recs);
    assert_eq!(to_csv(&from_csv(&csv).unwrap()).unwrap(), csv);

    let svg = render_sweep_svg(&recs).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains(">resnet34<") && svg.contains(">vgg_m<"));
}

#[test]
fn fewshot_grid_uses_way_by_shot_columns() {
    let mut recs = Vec::new();
    for (arch, base) in [("resnet34", 0.8), ("vgg_m", 0.6)] {
        let mut r = record("grid", arch, None, None);
        for (w, k) in [(5, 1), (5, 5), (20, 1), (20, 5)] {
            r.metrics.fewshot.push(GridCell {
                n_way: w,
                k_shot: k,
                n_episodes: 1000,
                mean_acc: base / (w as f64 / 5.0) * if k == 5 { 1.2 } else { 1.0 },
                ci95: 0.01,
            });
        }
        recs.push(r);
    }
    let grid = render_fewshot_grid(&recs).unwrap();
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines[0], "| arch | 5-way 1-shot | 5-way 5-shot | 20-way 1-shot | 20-way 5-shot |");
    assert_eq!(lines[2], "| resnet34 | 80.00 ± 1.00 | 96.00 ± 1.00 | 20.00 ± 1.00 | 24.00 ± 1.00 |");
    assert!(lines[3].starts_with("| vgg_m | 60.00"));
}

#[test]
fn config_files_layer_under_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.conf");
    let b = dir.path().join("b.conf");
    std::fs::write(&a, "learning_rate = 0.01\nbatch_size = 8\noptimizer = sgd_momentum\n").unwrap();
    std::fs::write(&b, "batch_size = 16\n").unwrap();
    let cfg = TrainConfig::classifier(Arch::VggM)
        .layered(&[a.as_path(), b.as_path()], &[("learning_rate".into(), "0.5".into())])
        .unwrap();
    assert_eq!((cfg.learning_rate, cfg.batch_size, cfg.optimizer), (0.5, 16, OptimizerKind::SgdMomentum));
    let resolved = dir.path().join("resolved.conf");
    std::fs::write(&resolved, cfg.to_text()).unwrap();
    let back = TrainConfig::classifier(Arch::CapsnetM).layered(&[resolved.as_path()], &[]).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn two_speaker_classifier_separates_and_repeats() {
    let data = pool(2, 8, 3);
    let mut cfg = TrainConfig::classifier(Arch::CapsnetM);
    cfg.batch_size = 8;
    cfg.max_steps = Some(50);
    cfg.max_epochs = 100;
    cfg.learning_rate = 1e-3;
    let run = train_classifier(&cfg, capsnet(2, 1), &data, Some(&data), "synthetic").unwrap();
    assert_eq!(run.losses.len(), 50);
    assert!(run.train_top1 >= 0.95, "train accuracy {}", run.train_top1);
    let m = &run.record.metrics;
    assert!(m.top5.unwrap() >= m.top1.unwrap());
    assert_eq!(run.record.parameter_count, run.model.count_parameters());
    run.record.validate().unwrap();

    cfg.max_steps = Some(4);
    let a = train_classifier(&cfg, capsnet(2, 1), &data, None, "synthetic").unwrap();
    let b = train_classifier(&cfg, capsnet(2, 1), &data, None, "synthetic").unwrap();
    for (x, y) in a.losses.iter().zip(&b.losses) {
        assert!((x - y).abs() < 1e-6);
    }
    assert_eq!(a.model.params().iter().count(), b.model.params().iter().count());

    assert!(matches!(
        train_classifier(&cfg, capsnet(3, 1), &data, None, "synthetic"),
        Err(Error::ConfigMismatch(_))
    ));
    let mut ce = cfg.clone();
    ce.loss = fssr_core::harness::LossKind::CrossEntropy;
    assert!(matches!(train_classifier(&ce, capsnet(2, 1), &data, None, "synthetic"), Err(Error::ConfigMismatch(_))));
}

#[test]
fn divergence_returns_the_last_good_parameters() {
    let data = pool(2, 4, 5);
    let mut cfg = TrainConfig::classifier(Arch::VggM);
    cfg.optimizer = OptimizerKind::SgdMomentum;
    cfg.learning_rate = 1e30;
    cfg.batch_size = 4;
    cfg.max_steps = Some(6);
    cfg.max_epochs = 10;
    let model = Model::new(ModelConfig::new(Arch::VggM, 2).with_seed(2)).unwrap();
    match train_classifier(&cfg, model, &data, None, "synthetic") {
        Err(Error::DivergenceDetected { step, last_good, .. }) => {
            assert!(step >= 1);
            let ckpt = last_good.expect("checkpoint attached");
            assert_eq!(ckpt.meta.step as usize, step);
            assert!(ckpt.tensors.iter().all(|t| t.tensor.all_finite()));
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.losses)),
    }
}

#[test]
fn zero_episodic_steps_leave_the_model_unchanged() {
    let data = pool(6, 4, 9);
    let model = capsnet(6, 4);
    let mut cfg = TrainConfig::episodic(Arch::CapsnetM);
    cfg.episodic.max_steps = 0;
    cfg.episodic.n_query = 2;
    let eval = EvalConfig {
        n_way: 5,
        k_shot: 1,
        n_query: 2,
        n_episodes: 50,
        seed: 1,
        ..Default::default()
    };
    let before = evaluate_few_shot(&model, &data, &eval).unwrap();
    let run = episodic_train(&cfg, model, &data, None, "synthetic").unwrap();
    assert_eq!(run.steps, 0);
    assert!(run.initial_loss.is_none());
    assert_eq!(evaluate_few_shot(&run.model, &data, &eval).unwrap(), before);
}

#[test]
fn episodic_training_restores_the_best_validation_point() {
    let data = pool(8, 4, 12);
    let mut cfg = TrainConfig::episodic(Arch::CapsnetM);
    cfg.episodic.max_steps = 6;
    cfg.episodic.eval_every = 2;
    cfg.episodic.n_query = 2;
    cfg.episodic.val_episodes = 20;
    let run = episodic_train(&cfg, capsnet(8, 4), &data, None, "synthetic").unwrap();
    assert_eq!(run.losses.len(), 6);
    assert!((run.initial_loss.unwrap() - 5f64.ln()).abs() < 0.2);
    let best = run.validation.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let at_best = run.validation.iter().find(|v| v.0 == run.best_step).unwrap().1;
    assert_eq!(at_best, best);
    assert!(run.validation.iter().take_while(|v| v.0 < run.best_step).all(|v| v.1 < best));

    let mut ma = TrainConfig::episodic(Arch::CapsnetMa);
    ma.loss = fssr_core::harness::LossKind::CapsmaComposite;
    ma.episodic = cfg.episodic;
    assert!(matches!(episodic_train(&ma, capsnet(8, 4), &data, None, "synthetic"), Err(Error::ConfigMismatch(_))));
}

#[test]
fn sweep_records_each_count() {
    let data = pool(3, 6, 2);
    let mut cfg = TrainConfig::classifier(Arch::CapsnetM);
    cfg.max_steps = Some(1);
    cfg.max_epochs = 1;
    let models = [ModelConfig::new(Arch::CapsnetM, 3).with_seed(1)];
    let recs = limited_samples_sweep(&models, &data, &data, &[2, 4], &cfg, "synthetic").unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs.iter().map(|r| r.samples_per_class).collect::<Vec<_>>(), [Some(2), Some(4)]);
    assert!(recs.iter().all(|r| r.experiment_tag == "limited_samples"));
    assert!(matches!(
        limited_samples_sweep(&models, &data, &data, &[7], &cfg, "synthetic"),
        Err(Error::InsufficientData(_))
    ));
}

#[test]
fn head_replacement_and_transfer() {
    let source = capsnet(50, 8);
    let fresh = source.replace_head(50, 99).unwrap();
    for (_, p) in source.params().iter() {
        let q = fresh.params().get(fresh.params().id_of(&p.name).unwrap());
        if source.is_head_param(&p.name) {
            assert_ne!(q.data(), p.value.data(), "{}", p.name);
        } else {
            assert_eq!(q.data(), p.value.data(), "{}", p.name);
        }
    }

    let data = pool(3, 4, 6);
    let mut cfg = TrainConfig::classifier(Arch::CapsnetM);
    cfg.max_steps = Some(2);
    let ckpt = source.checkpoint(CheckpointMeta::default()).unwrap();
    let run = transfer_finetune(&ckpt, &data, Some(&data), &cfg, "synthetic").unwrap();
    assert_eq!(run.model.config().n_classes, 3);
    assert_eq!(run.record.experiment_tag, "transfer_finetune");

    let mut broken = ckpt.clone();
    broken.tensors.pop();
    assert!(matches!(
        transfer_finetune(&broken, &data, None, &cfg, "synthetic"),
        Err(Error::CheckpointIncompatible(_))
    ));
}
