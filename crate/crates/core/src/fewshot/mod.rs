//! Prototypes, distance-softmax classification, the prototypical loss and
//! N-way K-shot evaluation.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{sample_episode_indices, EpisodePool, SpeakerLabel, SpectrogramPool};
use crate::error::{Error, Result};
use crate::models::{EmbeddingBatch, Model};
use crate::nn::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    SqEuclidean,
    Euclidean,
    Cosine,
}

impl Distance {
    pub fn as_str(self) -> &'static str {
        match self {
            Distance::SqEuclidean => "sq_euclidean",
            Distance::Euclidean => "euclidean",
            Distance::Cosine => "cosine",
        }
    }

    pub fn eval(self, q: ArrayView1<f64>, a: ArrayView1<f64>) -> f64 {
        match self {
            Distance::SqEuclidean => q.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum(),
            Distance::Euclidean => Distance::SqEuclidean.eval(q, a).sqrt(),
            Distance::Cosine => {
                let (nq, na) = (q.dot(&q).sqrt(), a.dot(&a).sqrt());
                if nq == 0.0 || na == 0.0 {
                    1.0
                } else {
                    1.0 - q.dot(&a) / (nq * na)
                }
            }
        }
    }

    /// Gradients of `eval(q, a)` w.r.t. `q` and `a`.
    pub fn grad(self, q: ArrayView1<f64>, a: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
        match self {
            Distance::SqEuclidean => {
                let d = (&q - &a) * 2.0;
                let neg = -&d;
                (d, neg)
            }
            Distance::Euclidean => {
                let diff = &q - &a;
                let n = diff.dot(&diff).sqrt();
                if n == 0.0 {
                    return (Array1::zeros(q.len()), Array1::zeros(q.len()));
                }
                let gq = diff / n;
                let ga = -&gq;
                (gq, ga)
            }
            Distance::Cosine => {
                let (nq, na) = (q.dot(&q).sqrt(), a.dot(&a).sqrt());
                if nq == 0.0 || na == 0.0 {
                    return (Array1::zeros(q.len()), Array1::zeros(q.len()));
                }
                let cos = q.dot(&a) / (nq * na);
                let gq = -(&a / (nq * na) - &q * (cos / (nq * nq)));
                let ga = -(&q / (nq * na) - &a * (cos / (na * na)));
                (gq, ga)
            }
        }
    }
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Distance::SqEuclidean, Distance::Euclidean, Distance::Cosine]
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown distance {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// Row `k` is the prototype of `labels[k]`.
    pub prototypes: Array2<f64>,
    pub labels: Vec<SpeakerLabel>,
    pub distance: Distance,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }
}

/// Mean support embedding per class `0..n_classes` given per-row class ids.
fn class_means(support: ArrayView2<f64>, classes: &[usize], n_classes: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    if classes.len() != support.nrows() {
        return Err(Error::ShapeMismatch(format!("{} support rows, {} labels", support.nrows(), classes.len())));
    }
    let mut sums = Array2::<f64>::zeros((n_classes, support.ncols()));
    let mut counts = vec![0usize; n_classes];
    for (row, &c) in support.rows().into_iter().zip(classes) {
        if c >= n_classes {
            return Err(Error::ShapeMismatch(format!("class {c} outside 0..{n_classes}")));
        }
        sums.row_mut(c).scaled_add(1.0, &row);
        counts[c] += 1;
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(format!("class {k} has no support embeddings")));
    }
    for (mut row, &n) in sums.rows_mut().into_iter().zip(&counts) {
        row /= n as f64;
    }
    Ok((sums, counts))
}

/// Prototypes for the given classes, in that order.
pub fn compute_prototypes_for(
    support: &EmbeddingBatch,
    classes: &[SpeakerLabel],
    distance: Distance,
) -> Result<PrototypeSet> {
    let labels = support
        .source_labels
        .as_ref()
        .ok_or_else(|| Error::ShapeMismatch("support embeddings carry no labels".into()))?;
    if classes.len() < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 classes, got {}", classes.len())));
    }
    let mut ids = Vec::with_capacity(labels.len());
    for l in labels {
        let k = classes
            .iter()
            .position(|c| c == l)
            .ok_or_else(|| Error::ShapeMismatch(format!("support label {} is not a requested class", l.name)))?;
        ids.push(k);
    }
    if let Some(missing) = classes.iter().enumerate().find(|(k, _)| !ids.contains(k)) {
        return Err(Error::EmptyClass(format!("speaker {} has no support embeddings", missing.1.name)));
    }
    let (prototypes, _) = class_means(support.vectors.view(), &ids, classes.len())?;
    Ok(PrototypeSet {
        prototypes,
        labels: classes.to_vec(),
        distance,
    })
}

/// Prototypes for every label present in `support`, ordered by label index.
pub fn compute_prototypes(support: &EmbeddingBatch, distance: Distance) -> Result<PrototypeSet> {
    let labels = support
        .source_labels
        .as_ref()
        .ok_or_else(|| Error::ShapeMismatch("support embeddings carry no labels".into()))?;
    let mut classes: Vec<SpeakerLabel> = labels.clone();
    classes.sort();
    classes.dedup();
    compute_prototypes_for(support, &classes, distance)
}

fn log_softmax_neg(dists: &[f64]) -> Vec<f64> {
    let max = dists.iter().map(|d| -d).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + dists.iter().map(|d| (-d - max).exp()).sum::<f64>().ln();
    dists.iter().map(|d| -d - lse).collect()
}

fn distances(q: ArrayView1<f64>, protos: ArrayView2<f64>, distance: Distance) -> Vec<f64> {
    protos.rows().into_iter().map(|a| distance.eval(q, a)).collect()
}

/// `log p(y = k | q)` over the prototypes.
pub fn classify_query(q: ArrayView1<f64>, protos: &PrototypeSet) -> Result<Array1<f64>> {
    if q.len() != protos.dim() {
        return Err(Error::DimensionMismatch {
            expected: protos.dim(),
            actual: q.len(),
        });
    }
    Ok(Array1::from(log_softmax_neg(&distances(q, protos.prototypes.view(), protos.distance))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub loss: f64,
    /// `n_queries x K` log-probabilities.
    pub log_probs: Array2<f64>,
    /// Fraction of queries classified correctly; a tie among `m` classes
    /// that includes the true one counts `1/m`.
    pub accuracy: f64,
}

/// Prototypical loss and its gradients w.r.t. support and query rows.
#[derive(Debug, Clone)]
pub struct PrototypicalTerms {
    pub result: EpisodeResult,
    pub grad_support: Array2<f64>,
    pub grad_query: Array2<f64>,
}

/// Episode loss with classes given as dense ids `0..n_classes`.
pub fn prototypical_terms(
    support: ArrayView2<f64>,
    support_classes: &[usize],
    query: ArrayView2<f64>,
    query_classes: &[usize],
    n_classes: usize,
    distance: Distance,
) -> Result<PrototypicalTerms> {
    if n_classes < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 classes, got {n_classes}")));
    }
    if query.nrows() != query_classes.len() {
        return Err(Error::ShapeMismatch(format!("{} query rows, {} labels", query.nrows(), query_classes.len())));
    }
    if query.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    if query.ncols() != support.ncols() {
        return Err(Error::DimensionMismatch {
            expected: support.ncols(),
            actual: query.ncols(),
        });
    }
    let (protos, counts) = class_means(support, support_classes, n_classes)?;
    let nq = query.nrows();
    let mut log_probs = Array2::<f64>::zeros((nq, n_classes));
    let mut grad_query = Array2::<f64>::zeros(query.raw_dim());
    let mut grad_protos = Array2::<f64>::zeros(protos.raw_dim());
    let mut loss = 0.0;
    let mut correct = 0.0;
    for (i, q) in query.rows().into_iter().enumerate() {
        let y = query_classes[i];
        if y >= n_classes {
            return Err(Error::ShapeMismatch(format!("query class {y} outside 0..{n_classes}")));
        }
        let lp = log_softmax_neg(&distances(q, protos.view(), distance));
        loss -= lp[y];
        let best = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let tied = lp.iter().filter(|&&v| v == best).count();
        if lp[y] == best {
            correct += 1.0 / tied as f64;
        }
        for k in 0..n_classes {
            // d(-log p_y)/d(d_k) = [k == y] - p_k
            let w = (if k == y { 1.0 } else { 0.0 } - lp[k].exp()) / nq as f64;
            if w != 0.0 {
                let (gq, ga) = distance.grad(q, protos.row(k));
                grad_query.row_mut(i).scaled_add(w, &gq);
                grad_protos.row_mut(k).scaled_add(w, &ga);
            }
        }
        log_probs.row_mut(i).assign(&Array1::from(lp));
    }
    let mut grad_support = Array2::<f64>::zeros(support.raw_dim());
    for (mut row, &c) in grad_support.rows_mut().into_iter().zip(support_classes) {
        row.assign(&(&grad_protos.row(c) / counts[c] as f64));
    }
    Ok(PrototypicalTerms {
        result: EpisodeResult {
            loss: loss / nq as f64,
            log_probs,
            accuracy: correct / nq as f64,
        },
        grad_support,
        grad_query,
    })
}

/// Prototypical loss over labelled support and query embeddings.
pub fn prototypical_loss(support: &EmbeddingBatch, query: &EmbeddingBatch, distance: Distance) -> Result<EpisodeResult> {
    let s_labels = support
        .source_labels
        .as_ref()
        .ok_or_else(|| Error::ShapeMismatch("support embeddings carry no labels".into()))?;
    let q_labels = query
        .source_labels
        .as_ref()
        .ok_or_else(|| Error::ShapeMismatch("query embeddings carry no labels".into()))?;
    let mut classes = s_labels.clone();
    classes.sort();
    classes.dedup();
    let id = |l: &SpeakerLabel| {
        classes
            .binary_search(l)
            .map_err(|_| Error::EmptyClass(format!("query speaker {} has no support embeddings", l.name)))
    };
    let s_ids = s_labels.iter().map(id).collect::<Result<Vec<_>>>()?;
    let q_ids = q_labels.iter().map(id).collect::<Result<Vec<_>>>()?;
    Ok(prototypical_terms(
        support.vectors.view(),
        &s_ids,
        query.vectors.view(),
        &q_ids,
        classes.len(),
        distance,
    )?
    .result)
}

/// Role of one row of an episode batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Support(usize),
    Query(usize),
}

/// Prototypical loss over the rows of `emb: [B, M]` as a graph node.
pub fn prototypical_loss_node(
    g: &mut Graph,
    emb: Var,
    roles: &[Role],
    n_classes: usize,
    distance: Distance,
) -> Result<(Var, EpisodeResult)> {
    let t = g.value(emb);
    let (b, m) = t.dims2()?;
    if roles.len() != b {
        return Err(Error::ShapeMismatch(format!("{b} embeddings, {} roles", roles.len())));
    }
    let all = Array2::from_shape_vec((b, m), t.to_f64()).expect("shape checked");
    let (mut s_rows, mut s_cls, mut q_rows, mut q_cls) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, r) in roles.iter().enumerate() {
        match *r {
            Role::Support(c) => {
                s_rows.push(i);
                s_cls.push(c);
            }
            Role::Query(c) => {
                q_rows.push(i);
                q_cls.push(c);
            }
        }
    }
    let support = all.select(ndarray::Axis(0), &s_rows);
    let query = all.select(ndarray::Axis(0), &q_rows);
    let terms = prototypical_terms(support.view(), &s_cls, query.view(), &q_cls, n_classes, distance)?;
    let mut grad = vec![0.0f64; b * m];
    for (j, &i) in s_rows.iter().enumerate() {
        grad[i * m..(i + 1) * m].copy_from_slice(terms.grad_support.row(j).as_slice().expect("contiguous"));
    }
    for (j, &i) in q_rows.iter().enumerate() {
        grad[i * m..(i + 1) * m].copy_from_slice(terms.grad_query.row(j).as_slice().expect("contiguous"));
    }
    let grad = Tensor::from_f64(&[b, m], &grad)?;
    let node = g.scalar_with_grads("prototypical_loss", &[emb], terms.result.loss, vec![Some(grad)])?;
    Ok((node, terms.result))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub n_episodes: usize,
    pub seed: u64,
    pub distance: Distance,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            n_query: 15,
            n_episodes: 1000,
            seed: 0,
            distance: Distance::SqEuclidean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotReport {
    pub mean_acc: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
    pub episode_accuracies: Vec<f64>,
}

/// Machine-readable evaluation record, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub arch: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_episodes: usize,
    pub seed: u64,
    pub mean_acc: f64,
    pub ci95: f64,
}

impl EvalRecord {
    pub fn new(arch: impl Into<String>, cfg: &EvalConfig, report: &FewShotReport) -> Self {
        Self {
            arch: arch.into(),
            n_way: cfg.n_way,
            k_shot: cfg.k_shot,
            n_episodes: cfg.n_episodes,
            seed: cfg.seed,
            mean_acc: report.mean_acc,
            ci95: report.ci95,
        }
    }

    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }
}

/// Random stream of episode `index` under `seed`; independent of the order
/// in which episodes are evaluated.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Accuracy of one episode with seeded uniform tie-breaking.
fn episode_accuracy<R: Rng>(
    embeddings: ArrayView2<f64>,
    pool: &EpisodePool,
    cfg: &EvalConfig,
    rng: &mut R,
) -> Result<f64> {
    let ep = sample_episode_indices(pool, cfg.n_way, cfg.k_shot, cfg.n_query, rng)?;
    let s_rows: Vec<usize> = ep.support.iter().map(|&(i, _)| i).collect();
    let s_cls: Vec<usize> = ep.support.iter().map(|&(_, c)| c).collect();
    let support = embeddings.select(ndarray::Axis(0), &s_rows);
    let (protos, _) = class_means(support.view(), &s_cls, cfg.n_way)?;
    let mut correct = 0usize;
    for &(item, y) in &ep.query {
        let lp = log_softmax_neg(&distances(embeddings.row(item), protos.view(), cfg.distance));
        let best = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..lp.len()).filter(|&k| lp[k] == best).collect();
        let pick = if tied.len() == 1 { tied[0] } else { tied[rng.random_range(0..tied.len())] };
        if pick == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / ep.query.len() as f64)
}

/// Few-shot evaluation over precomputed embeddings (row `i` embeds pool item `i`).
pub fn evaluate_embeddings(embeddings: ArrayView2<f64>, pool: &EpisodePool, cfg: &EvalConfig) -> Result<FewShotReport> {
    if embeddings.nrows() != pool.n_items() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings for a pool of {} items",
            embeddings.nrows(),
            pool.n_items()
        )));
    }
    if cfg.n_episodes == 0 {
        return Err(Error::InvalidConfig("n_episodes must be positive".into()));
    }
    pool.check_supports(cfg.n_way, cfg.k_shot, cfg.n_query)?;
    let accs = (0..cfg.n_episodes)
        .into_par_iter()
        .map(|e| episode_accuracy(embeddings, pool, cfg, &mut episode_rng(cfg.seed, e as u64)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(summarize(accs))
}

pub fn summarize(accs: Vec<f64>) -> FewShotReport {
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = if accs.len() > 1 {
        accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    FewShotReport {
        mean_acc: mean,
        ci95: 1.96 * var.sqrt() / n.sqrt(),
        episode_accuracies: accs,
    }
}

/// Embeds every pool item once in evaluation mode, then runs the episodes.
pub fn evaluate_few_shot(model: &Model, pool: &SpectrogramPool, cfg: &EvalConfig) -> Result<FewShotReport> {
    pool.episode_pool().check_supports(cfg.n_way, cfg.k_shot, cfg.n_query)?;
    let specs: Vec<_> = pool.items.iter().collect();
    let emb = model.embed(&specs)?;
    evaluate_embeddings(emb.vectors.view(), &pool.episode_pool(), cfg)
}

/// Accuracy grid keyed by `(n_way, k_shot)`.
pub fn evaluate_grid(
    model: &Model,
    pool: &SpectrogramPool,
    ways: &[usize],
    shots: &[usize],
    base: &EvalConfig,
) -> Result<BTreeMap<(usize, usize), FewShotReport>> {
    let specs: Vec<_> = pool.items.iter().collect();
    let emb = model.embed(&specs)?;
    let ep = pool.episode_pool();
    let mut out = BTreeMap::new();
    for &n_way in ways {
        for &k_shot in shots {
            let cfg = EvalConfig { n_way, k_shot, ..*base };
            out.insert((n_way, k_shot), evaluate_embeddings(emb.vectors.view(), &ep, &cfg)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;
    use crate::gradcheck::{central_difference, relative_error};

    fn label(i: usize) -> SpeakerLabel {
        SpeakerLabel {
            name: format!("s{i}"),
            index: i,
        }
    }

    #[test]
    fn prototypes_are_class_means() {
        let support = EmbeddingBatch::with_labels(
            array![[1.0, 0.0], [3.0, 2.0], [5.0, 5.0]],
            vec![label(0), label(0), label(1)],
        )
        .unwrap();
        let p = compute_prototypes(&support, Distance::SqEuclidean).unwrap();
        assert_eq!(p.prototypes, array![[2.0, 1.0], [5.0, 5.0]]);
        let missing = compute_prototypes_for(&support, &[label(0), label(1), label(2)], Distance::SqEuclidean);
        assert!(matches!(missing, Err(Error::EmptyClass(msg)) if msg.contains("s2")));
    }

    #[test]
    fn equidistant_query_is_uniform() {
        let p = PrototypeSet {
            prototypes: array![[1.0, 0.0], [-1.0, 0.0]],
            labels: vec![label(0), label(1)],
            distance: Distance::SqEuclidean,
        };
        let lp = classify_query(array![0.0, 3.0].view(), &p).unwrap();
        assert!((lp[0] - 0.5f64.ln()).abs() < 1e-15 && (lp[1] - 0.5f64.ln()).abs() < 1e-15);
        assert!(matches!(
            classify_query(array![0.0].view(), &p),
            Err(Error::DimensionMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn hand_set_distances() {
        // Prototypes at squared distances 1, 2 and 4 from the origin.
        let p = PrototypeSet {
            prototypes: array![[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]],
            labels: vec![label(0), label(1), label(2)],
            distance: Distance::SqEuclidean,
        };
        let lp = classify_query(array![0.0, 0.0].view(), &p).unwrap();
        let z = (-1.0f64).exp() + (-2.0f64).exp() + (-4.0f64).exp();
        for (k, d) in [1.0f64, 2.0, 4.0].iter().enumerate() {
            assert!((lp[k] - ((-d).exp() / z).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn two_class_scalar_episode_closed_form() {
        // Support 0 -> class 0, 2 -> class 1; query 0.5 of class 0.
        let t = prototypical_terms(
            array![[0.0], [2.0]].view(),
            &[0, 1],
            array![[0.5]].view(),
            &[0],
            2,
            Distance::SqEuclidean,
        )
        .unwrap();
        let expected = (1.0 + (0.25f64 - 2.25).exp()).ln();
        assert!((t.result.loss - expected).abs() < 1e-14);
        assert_eq!(t.result.accuracy, 1.0);
    }

    #[test]
    fn gradients_match_finite_differences_for_every_distance() {
        let support = array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.3], [-0.5, 0.2, 0.1], [0.6, 0.1, 0.2]];
        let query = array![[0.2, 0.1, 0.0], [-0.3, 0.3, 0.2], [0.5, -0.1, 0.4]];
        let (sc, qc) = ([0, 1, 2, 0], [0, 2, 1]);
        for distance in [Distance::SqEuclidean, Distance::Euclidean, Distance::Cosine] {
            let t = prototypical_terms(support.view(), &sc, query.view(), &qc, 3, distance).unwrap();
            let fd_q = central_difference(
                |v| {
                    let q = Array2::from_shape_vec(query.dim(), v.to_vec()).unwrap();
                    prototypical_terms(support.view(), &sc, q.view(), &qc, 3, distance).unwrap().result.loss
                },
                query.as_slice().unwrap(),
                1e-6,
            );
            let fd_s = central_difference(
                |v| {
                    let s = Array2::from_shape_vec(support.dim(), v.to_vec()).unwrap();
                    prototypical_terms(s.view(), &sc, query.view(), &qc, 3, distance).unwrap().result.loss
                },
                support.as_slice().unwrap(),
                1e-6,
            );
            assert!(relative_error(t.grad_query.as_slice().unwrap(), &fd_q) < 1e-6, "{distance:?}");
            assert!(relative_error(t.grad_support.as_slice().unwrap(), &fd_s) < 1e-6, "{distance:?}");
        }
    }
}
