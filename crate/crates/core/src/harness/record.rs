use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One cell of a few-shot accuracy grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    #[serde(default)]
    pub fewshot: Vec<GridCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment_tag: String,
    pub arch: String,
    pub dataset: String,
    /// Train items per speaker, for limited-sample runs.
    pub samples_per_class: Option<usize>,
    pub metrics: Metrics,
    pub parameter_count: usize,
    pub wall_time_s: f64,
    pub config: serde_json::Value,
}

impl ExperimentRecord {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let m = &self.metrics;
        if m.top1.is_some_and(|v| !in_unit(v)) || m.top5.is_some_and(|v| !in_unit(v)) {
            return Err(Error::InvalidConfig(format!("{}: accuracy outside [0, 1]", self.experiment_tag)));
        }
        if let (Some(t1), Some(t5)) = (m.top1, m.top5) {
            if t5 < t1 {
                return Err(Error::InvalidConfig(format!("{}: top5 {t5} < top1 {t1}", self.experiment_tag)));
            }
        }
        if m.fewshot.iter().any(|c| !in_unit(c.mean_acc)) {
            return Err(Error::InvalidConfig(format!("{}: few-shot accuracy outside [0, 1]", self.experiment_tag)));
        }
        if self.parameter_count == 0 {
            return Err(Error::InvalidConfig(format!("{}: parameter_count is zero", self.experiment_tag)));
        }
        Ok(())
    }
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[ExperimentRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn append_jsonl(path: impl AsRef<Path>, record: &ExperimentRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<ExperimentRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
