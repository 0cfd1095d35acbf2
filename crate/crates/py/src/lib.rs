//! Python module `fssr`.

use std::path::PathBuf;

use fssr_core::audio::{self as audio, AudioClip, Spectrogram as CoreSpectrogram, StftConfig};
use fssr_core::datasets::{EpisodePool, SpeakerLabel};
use fssr_core::fewshot::{self, Distance, EvalConfig};
use fssr_core::harness::{run_selftest, SyntheticConfig, SyntheticCorpus};
use fssr_core::models::{Arch, Model as CoreModel, ModelConfig};
use fssr_core::nn::CheckpointMeta;
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: fssr_core::Error) -> PyErr {
    match e {
        fssr_core::Error::Io(_) | fssr_core::Error::UnreadableFile { .. } | fssr_core::Error::MissingRoot(_) => {
            PyIOError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows_to_array(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn array_to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse_distance(s: &str) -> PyResult<Distance> {
    s.parse().map_err(py_err)
}

/// Normalized `bins x frames` log-magnitude spectrogram.
#[pyclass(module = "fssr", frozen, from_py_object)]
#[derive(Clone)]
struct Spectrogram {
    inner: CoreSpectrogram,
}

#[pymethods]
impl Spectrogram {
    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    #[getter]
    fn normalized(&self) -> bool {
        self.inner.normalized
    }

    fn to_list(&self) -> Vec<Vec<f32>> {
        self.inner.values.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn __repr__(&self) -> String {
        let (b, f) = self.inner.shape();
        format!("Spectrogram({b}x{f}, normalized={})", self.inner.normalized)
    }
}

/// Spectrogram of mono samples; pass `normalize=False` for the raw magnitudes.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate=16000, normalize=true))]
fn spectrogram(samples: Vec<f32>, sample_rate: u32, normalize: bool) -> PyResult<Spectrogram> {
    let clip = audio::standardize(AudioClip::new(samples, sample_rate)).map_err(py_err)?;
    let mut spec = audio::compute_spectrogram(&clip, &StftConfig::default()).map_err(py_err)?;
    if normalize {
        spec = audio::normalize_bins(&spec).map_err(py_err)?;
    }
    Ok(Spectrogram { inner: spec })
}

/// Mono 16 kHz samples of a wav file.
#[pyfunction]
fn load_wav(path: PathBuf) -> PyResult<Vec<f32>> {
    Ok(audio::load_and_standardize(path).map_err(py_err)?.samples)
}

/// Deterministic 3 s clip of a synthetic speaker.
#[pyfunction]
#[pyo3(signature = (speaker, utterance, n_speakers=20, seed=7))]
fn synthetic_clip(speaker: usize, utterance: usize, n_speakers: usize, seed: u64) -> PyResult<Vec<f32>> {
    if speaker >= n_speakers {
        return Err(PyValueError::new_err(format!("speaker {speaker} out of range for {n_speakers}")));
    }
    let corpus = SyntheticCorpus::new(SyntheticConfig {
        n_speakers,
        utterances_per_speaker: utterance + 1,
        seed,
        ..Default::default()
    })
    .map_err(py_err)?;
    Ok(corpus.clip(speaker, utterance).samples)
}

#[pyclass(module = "fssr", unsendable)]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (arch, n_classes, seed=0))]
    fn new(arch: &str, n_classes: usize, seed: u64) -> PyResult<Self> {
        let arch: Arch = arch.parse().map_err(py_err)?;
        let inner = CoreModel::new(ModelConfig::new(arch, n_classes).with_seed(seed)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreModel::load(path).map_err(py_err)?.0,
        })
    }

    #[pyo3(signature = (path, step=0, seed=0, tag=String::new()))]
    fn save(&self, path: PathBuf, step: u64, seed: u64, tag: String) -> PyResult<()> {
        self.inner.save(path, CheckpointMeta { step, seed, tag }).map_err(py_err)
    }

    #[getter]
    fn arch(&self) -> &'static str {
        self.inner.arch().as_str()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.config().n_classes
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.config().embedding_width()
    }

    fn count_parameters(&self) -> usize {
        self.inner.count_parameters()
    }

    /// One embedding row per spectrogram.
    fn embed(&self, specs: Vec<Spectrogram>) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&CoreSpectrogram> = specs.iter().map(|s| &s.inner).collect();
        Ok(array_to_rows(&self.inner.embed(&refs).map_err(py_err)?.vectors))
    }

    /// Class scores (logits or capsule lengths) per spectrogram.
    fn scores(&self, specs: Vec<Spectrogram>) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&CoreSpectrogram> = specs.iter().map(|s| &s.inner).collect();
        Ok(array_to_rows(&self.inner.scores(&refs).map_err(py_err)?))
    }

    fn __repr__(&self) -> String {
        format!("Model(arch={}, n_classes={})", self.inner.arch(), self.inner.config().n_classes)
    }
}

/// `(loss, accuracy)` of one episode; classes are dense ids.
#[pyfunction]
#[pyo3(signature = (support, support_classes, query, query_classes, distance="sq_euclidean"))]
fn prototypical_loss(
    support: Vec<Vec<f64>>,
    support_classes: Vec<usize>,
    query: Vec<Vec<f64>>,
    query_classes: Vec<usize>,
    distance: &str,
) -> PyResult<(f64, f64)> {
    let s = rows_to_array(&support)?;
    let q = rows_to_array(&query)?;
    let n = support_classes.iter().max().map_or(0, |m| m + 1);
    let t = fewshot::prototypical_terms(s.view(), &support_classes, q.view(), &query_classes, n, parse_distance(distance)?)
        .map_err(py_err)?;
    Ok((t.result.loss, t.result.accuracy))
}

/// Log-probabilities of `query` over the class prototypes.
#[pyfunction]
#[pyo3(signature = (query, prototypes, distance="sq_euclidean"))]
fn classify_query(query: Vec<f64>, prototypes: Vec<Vec<f64>>, distance: &str) -> PyResult<Vec<f64>> {
    let protos = rows_to_array(&prototypes)?;
    let set = fewshot::PrototypeSet {
        labels: (0..protos.nrows()).map(|i| SpeakerLabel::new(i.to_string(), i)).collect(),
        prototypes: protos,
        distance: parse_distance(distance)?,
    };
    Ok(fewshot::classify_query(ndarray::Array1::from(query).view(), &set).map_err(py_err)?.to_vec())
}

/// `(mean accuracy, 95% half-width)` over sampled episodes of fixed embeddings.
#[pyfunction]
#[pyo3(signature = (embeddings, labels, n_way=5, k_shot=1, n_query=5, n_episodes=1000, seed=0, distance="sq_euclidean"))]
#[allow(clippy::too_many_arguments)]
fn evaluate_embeddings(
    embeddings: Vec<Vec<f64>>,
    labels: Vec<String>,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    n_episodes: usize,
    seed: u64,
    distance: &str,
) -> PyResult<(f64, f64)> {
    let emb = rows_to_array(&embeddings)?;
    let mut names = labels.clone();
    names.sort();
    names.dedup();
    let labels: Vec<SpeakerLabel> = labels
        .iter()
        .map(|l| SpeakerLabel::new(l.clone(), names.binary_search(l).expect("label present")))
        .collect();
    let cfg = EvalConfig {
        n_way,
        k_shot,
        n_query,
        n_episodes,
        seed,
        distance: parse_distance(distance)?,
    };
    let r = fewshot::evaluate_embeddings(emb.view(), &EpisodePool::from_labels(&labels), &cfg).map_err(py_err)?;
    Ok((r.mean_acc, r.ci95))
}

/// `[(name, value, passed), ...]`.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn selftest(seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let r = run_selftest(seed).map_err(py_err)?;
    Ok(r.checks.into_iter().map(|c| (c.name, c.value, c.passed)).collect())
}

#[pymodule]
fn fssr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Spectrogram>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(load_wav, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_clip, m)?)?;
    m.add_function(wrap_pyfunction!(prototypical_loss, m)?)?;
    m.add_function(wrap_pyfunction!(classify_query, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
