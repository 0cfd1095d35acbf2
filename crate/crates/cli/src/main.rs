use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fssr_core::audio::{compute_spectrogram, crop_at, load_and_standardize, normalize_bins, samples_for, repeat_to_length, write_spectrogram, ShortClipPolicy, StftConfig};
use fssr_core::datasets::{build_vctk_split, build_voxceleb_split, Manifest, PoolLoader, SpectrogramCache, SpectrogramPool, Split, CROP_SECONDS};
use fssr_core::fewshot::{Distance, EvalConfig};
use fssr_core::harness::{
    append_jsonl, episodic_train, fewshot_record, limited_samples_sweep, read_jsonl, report, run_selftest, split_speakers,
    train_classifier, transfer_finetune, ExperimentRecord, ReportFormat, SyntheticConfig, SyntheticCorpus, TrainConfig,
};
use fssr_core::models::{Arch, Model, ModelConfig};
use fssr_core::nn::{Checkpoint, CheckpointMeta};

#[derive(Parser)]
#[command(name = "fssr", version, about = "Few-shot speaker recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a train/test manifest from a corpus directory.
    PrepareSplits(PrepareArgs),
    /// Write the normalized spectrogram of one wav file.
    Spectrogram(SpectrogramArgs),
    /// Supervised classifier training on the manifest's train split.
    Train(TrainArgs),
    /// Prototypical (episodic) training.
    EpisodicTrain(TrainArgs),
    /// Few-shot accuracy grid on a manifest split.
    FewshotEval(FewshotArgs),
    /// Replace the class head of a checkpoint and train on a new corpus.
    Finetune(FinetuneArgs),
    /// Limited-samples sweep over several architectures.
    Sweep(SweepArgs),
    /// Render experiment records as a table, CSV or SVG plot.
    Report(ReportArgs),
    /// Numeric self-checks; exits non-zero on failure.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic tone corpus laid out like VoxCeleb1.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Corpus {
    Voxceleb,
    Vctk,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long, value_enum)]
    dataset: Corpus,
    #[arg(long)]
    root: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    n_classes: usize,
    /// Training crops per speaker (VoxCeleb).
    #[arg(long, default_value_t = 20)]
    k_per_class: usize,
    /// Per-speaker training fraction (VCTK).
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SpectrogramArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Crop start in seconds.
    #[arg(long, default_value_t = 0.0)]
    offset: f64,
    /// Loop short clips instead of failing.
    #[arg(long)]
    pad: bool,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Loop clips shorter than the crop instead of failing.
    #[arg(long)]
    pad: bool,
}

impl DataArgs {
    fn loader(&self) -> Result<PoolLoader> {
        let policy = if self.pad { ShortClipPolicy::PadWithRepeat } else { ShortClipPolicy::Error };
        Ok(PoolLoader::new(StftConfig::default(), policy, SpectrogramCache::from_env()?))
    }

    fn load(&self) -> Result<(Manifest, PoolLoader)> {
        let manifest = Manifest::load(&self.manifest).with_context(|| format!("reading {}", self.manifest.display()))?;
        Ok((manifest, self.loader()?))
    }

    fn dataset(&self) -> String {
        self.manifest.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "manifest".into())
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config files, applied in order.
    #[arg(long = "config")]
    files: Vec<PathBuf>,
    /// Single overrides as `key=value`, applied last.
    #[arg(long = "set", value_parser = parse_kv)]
    overrides: Vec<(String, String)>,
}

impl ConfigArgs {
    fn resolve(&self, base: TrainConfig) -> Result<TrainConfig> {
        let files: Vec<&Path> = self.files.iter().map(PathBuf::as_path).collect();
        Ok(base.layered(&files, &self.overrides)?)
    }
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    arch: Arch,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Frozen,
    EpisodicFinetune,
}

#[derive(Args)]
struct FewshotArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "frozen")]
    mode: EvalMode,
    #[arg(long, value_delimiter = ',', default_value = "5,20")]
    ways: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    shots: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    n_query: usize,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "sq_euclidean")]
    distance: Distance,
    /// Training settings for `episodic-finetune`.
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "vgg_m,resnet34,capsnet_m")]
    archs: Vec<Arch>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
    counts: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// JSONL record files.
    #[arg(required = true)]
    records: Vec<PathBuf>,
    #[arg(long, default_value = "table")]
    format: ReportFormat,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    #[arg(long, default_value_t = 12)]
    utterances: usize,
    #[arg(long, default_value_t = 4)]
    test_per_speaker: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::PrepareSplits(a) => prepare(a),
        Command::Spectrogram(a) => spectrogram(a),
        Command::Train(a) => train(a, false),
        Command::EpisodicTrain(a) => train(a, true),
        Command::FewshotEval(a) => fewshot(a),
        Command::Finetune(a) => finetune(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => {
            let mut records = Vec::new();
            for p in &a.records {
                records.extend(read_jsonl(p).with_context(|| format!("reading {}", p.display()))?);
            }
            for p in report(&records, a.format, &a.out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Selftest { seed } => {
            let r = run_selftest(seed)?;
            for c in &r.checks {
                println!("{:<48} {:>12.3e} {}", c.name, c.value, if c.passed { "ok" } else { "FAILED" });
            }
            if !r.all_passed() {
                bail!("selftest failed");
            }
            Ok(())
        }
        Command::Synth(a) => {
            let corpus = SyntheticCorpus::new(SyntheticConfig {
                n_speakers: a.speakers,
                utterances_per_speaker: a.utterances,
                seed: a.seed,
                ..Default::default()
            })?;
            let files = corpus.write_corpus(&a.out, a.test_per_speaker)?;
            println!("wrote {} files under {}", files.len(), a.out.display());
            Ok(())
        }
    }
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let manifest = match a.dataset {
        Corpus::Voxceleb => build_voxceleb_split(&a.root, a.n_classes, a.k_per_class, a.seed)?,
        Corpus::Vctk => build_vctk_split(&a.root, a.train_fraction, a.seed)?,
    };
    manifest.save(&a.out)?;
    println!(
        "{}: {} speakers, {} train / {} test entries",
        a.out.display(),
        manifest.n_speakers(),
        manifest.split(Split::Train).count(),
        manifest.split(Split::Test).count()
    );
    Ok(())
}

fn spectrogram(a: SpectrogramArgs) -> Result<()> {
    let clip = load_and_standardize(&a.input)?;
    let len = samples_for(CROP_SECONDS, clip.sample_rate_hz);
    let offset = samples_for(a.offset, clip.sample_rate_hz);
    let clip = if a.pad && clip.len() < offset + len { repeat_to_length(&clip, offset + len)? } else { clip };
    let spec = normalize_bins(&compute_spectrogram(&crop_at(&clip, offset, len)?, &StftConfig::default())?)?;
    write_spectrogram(fs::File::create(&a.out)?, &spec)?;
    println!("{}: {} x {}", a.out.display(), spec.bins(), spec.frames());
    Ok(())
}

fn prepare_out(out: &Path, cfg: Option<&TrainConfig>) -> Result<()> {
    fs::create_dir_all(out)?;
    if let Some(cfg) = cfg {
        fs::write(out.join("resolved.conf"), cfg.to_text())?;
    }
    Ok(())
}

fn finish(out: &Path, record: &ExperimentRecord) -> Result<()> {
    append_jsonl(out.join("records.jsonl"), record)?;
    println!("{}", serde_json::to_string(&record.metrics)?);
    Ok(())
}

fn train(a: TrainArgs, episodic: bool) -> Result<()> {
    let base = if episodic { TrainConfig::episodic(a.arch) } else { TrainConfig::classifier(a.arch) };
    let cfg = a.config.resolve(base)?;
    prepare_out(&a.out, Some(&cfg))?;
    let (manifest, loader) = a.data.load()?;
    let train_pool = loader.load(&manifest, Split::Train)?;
    let model = match &a.init {
        Some(p) => {
            let (m, _) = Model::load(p)?;
            if m.arch() != a.arch {
                bail!("{} holds a {} model, not {}", p.display(), m.arch(), a.arch);
            }
            if episodic { m } else { m.replace_head(train_pool.n_speakers(), cfg.seed)? }
        }
        None => Model::new(ModelConfig::new(a.arch, train_pool.n_speakers()).with_seed(cfg.seed))?,
    };
    let dataset = a.data.dataset();
    let record = if episodic {
        let run = episodic_train(&cfg, model, &train_pool, None, &dataset)?;
        run.model.save(a.out.join("model.ckpt"), CheckpointMeta { step: run.best_step as u64, seed: cfg.seed, tag: "episodic".into() })?;
        run.record
    } else {
        let test_pool = loader.load(&manifest, Split::Test).ok();
        let run = train_classifier(&cfg, model, &train_pool, test_pool.as_ref(), &dataset)?;
        run.model.save(a.out.join("model.ckpt"), CheckpointMeta { step: run.losses.len() as u64, seed: cfg.seed, tag: "classifier".into() })?;
        run.record
    };
    finish(&a.out, &record)
}

fn fewshot(a: FewshotArgs) -> Result<()> {
    let (model, _) = Model::load(&a.checkpoint)?;
    let (manifest, loader) = a.data.load()?;
    let dataset = a.data.dataset();
    let base = EvalConfig {
        n_way: a.ways[0],
        k_shot: a.shots[0],
        n_query: a.n_query,
        n_episodes: a.episodes,
        seed: a.seed,
        distance: a.distance,
    };
    let (model, pool, tag, cfg) = match a.mode {
        EvalMode::Frozen => (model, loader.load(&manifest, Split::Test)?, "fewshot_frozen", None),
        EvalMode::EpisodicFinetune => {
            let cfg = a.config.resolve(TrainConfig::episodic(model.arch()))?;
            let pool = loader.load(&manifest, Split::Test)?;
            let (adapt, eval) = split_speakers(&pool, 0.5, cfg.seed);
            let run = episodic_train(&cfg, model, &adapt, None, &dataset)?;
            (run.model, eval, "fewshot_episodic_finetune", Some(cfg))
        }
    };
    prepare_out(&a.out, cfg.as_ref())?;
    let record = fewshot_record(&model, &pool, &a.ways, &a.shots, &base, tag, &dataset)?;
    finish(&a.out, &record)
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let arch = Model::from_checkpoint(&ckpt)?.arch();
    let cfg = a.config.resolve(TrainConfig::classifier(arch))?;
    prepare_out(&a.out, Some(&cfg))?;
    let (manifest, loader) = a.data.load()?;
    let train_pool = loader.load(&manifest, Split::Train)?;
    let test_pool: Option<SpectrogramPool> = loader.load(&manifest, Split::Test).ok();
    let run = transfer_finetune(&ckpt, &train_pool, test_pool.as_ref(), &cfg, &a.data.dataset())?;
    run.model.save(a.out.join("model.ckpt"), CheckpointMeta { step: run.losses.len() as u64, seed: cfg.seed, tag: "finetune".into() })?;
    finish(&a.out, &run.record)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = a.config.resolve(TrainConfig::classifier(a.archs[0]))?;
    prepare_out(&a.out, Some(&cfg))?;
    let (manifest, loader) = a.data.load()?;
    let train_pool = loader.load(&manifest, Split::Train)?;
    let test_pool = loader.load(&manifest, Split::Test)?;
    let models: Vec<ModelConfig> =
        a.archs.iter().map(|&arch| ModelConfig::new(arch, train_pool.n_speakers()).with_seed(cfg.seed)).collect();
    for r in limited_samples_sweep(&models, &train_pool, &test_pool, &a.counts, &cfg, &a.data.dataset())? {
        finish(&a.out, &r)?;
    }
    Ok(())
}
