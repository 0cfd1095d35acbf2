//! Training loops, experiment records, reports and the synthetic corpus.

mod config;
mod metrics;
mod record;
mod report;
mod selftest;
mod synth;
mod train;

pub use config::{CompositeWeights, EpisodicSettings, LossKind, TrainConfig};
pub use metrics::topk_accuracy;
pub use record::{append_jsonl, read_jsonl, write_jsonl, ExperimentRecord, GridCell, Metrics};
pub use report::{from_csv, render_fewshot_grid, render_sweep_svg, render_table, report, to_csv, ReportFormat};
pub use selftest::{run_selftest, Check, SelftestReport};
pub use synth::{SyntheticConfig, SyntheticCorpus, Voice};
pub use train::{
    episodic_train, evaluate_classifier, fewshot_record, limited_samples_sweep, split_speakers, train_classifier,
    transfer_finetune, zero_finetune_eval, ClassifierRun, EpisodicRun,
};
