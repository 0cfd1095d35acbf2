use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SpeakerLabel;
use crate::audio::Spectrogram;
use crate::error::{Error, Result};

/// Item indices grouped by speaker; the index view of a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePool {
    labels: Vec<SpeakerLabel>,
    members: Vec<Vec<usize>>,
    n_items: usize,
}

impl EpisodePool {
    /// Groups items by label; speakers are ordered by label index.
    pub fn from_labels(item_labels: &[SpeakerLabel]) -> Self {
        let mut labels: Vec<SpeakerLabel> = item_labels.to_vec();
        labels.sort();
        labels.dedup();
        let mut members = vec![Vec::new(); labels.len()];
        for (i, l) in item_labels.iter().enumerate() {
            let k = labels.binary_search(l).expect("label collected above");
            members[k].push(i);
        }
        Self {
            labels,
            members,
            n_items: item_labels.len(),
        }
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_speakers(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[SpeakerLabel] {
        &self.labels
    }

    pub fn members(&self, speaker: usize) -> &[usize] {
        &self.members[speaker]
    }

    fn eligible(&self, per_speaker: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&k| self.members[k].len() >= per_speaker).collect()
    }

    pub fn check_supports(&self, n_way: usize, k_shot: usize, n_query: usize) -> Result<()> {
        if n_way < 2 || k_shot < 1 || n_query < 1 {
            return Err(Error::InvalidConfig(format!(
                "episode shape n_way={n_way} k_shot={k_shot} n_query={n_query} needs n_way >= 2, k_shot >= 1, n_query >= 1"
            )));
        }
        let need = k_shot + n_query;
        let eligible = self.eligible(need).len();
        if self.labels.len() < n_way {
            return Err(Error::PoolTooSmall(format!(
                "n_way={n_way} exceeds the {} speakers in the pool",
                self.labels.len()
            )));
        }
        if eligible < n_way {
            return Err(Error::PoolTooSmall(format!(
                "only {eligible} speakers have k_shot + n_query = {need} items, n_way={n_way} needed"
            )));
        }
        Ok(())
    }
}

/// Item indices of one episode; classes are numbered `0..n_way`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeIndices {
    pub classes: Vec<SpeakerLabel>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

/// Draws speakers uniformly without replacement, then support and query
/// items uniformly without replacement within each speaker.
pub fn sample_episode_indices<R: Rng + ?Sized>(
    pool: &EpisodePool,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut R,
) -> Result<EpisodeIndices> {
    pool.check_supports(n_way, k_shot, n_query)?;
    let eligible = pool.eligible(k_shot + n_query);
    let chosen = sample(rng, eligible.len(), n_way);
    let mut ep = EpisodeIndices {
        classes: Vec::with_capacity(n_way),
        support: Vec::with_capacity(n_way * k_shot),
        query: Vec::with_capacity(n_way * n_query),
    };
    for (class, pick) in chosen.into_iter().enumerate() {
        let speaker = eligible[pick];
        ep.classes.push(pool.labels[speaker].clone());
        let items = &pool.members[speaker];
        let drawn = sample(rng, items.len(), k_shot + n_query);
        for (j, i) in drawn.into_iter().enumerate() {
            if j < k_shot {
                ep.support.push((items[i], class));
            } else {
                ep.query.push((items[i], class));
            }
        }
    }
    Ok(ep)
}

/// Spectrograms with their speaker labels and utterance ids.
#[derive(Debug, Clone, Default)]
pub struct SpectrogramPool {
    pub items: Vec<Spectrogram>,
    pub labels: Vec<SpeakerLabel>,
    pub ids: Vec<String>,
}

impl SpectrogramPool {
    pub fn new(items: Vec<Spectrogram>, labels: Vec<SpeakerLabel>, ids: Vec<String>) -> Result<Self> {
        if items.len() != labels.len() || items.len() != ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} spectrograms, {} labels, {} ids",
                items.len(),
                labels.len(),
                ids.len()
            )));
        }
        Ok(Self { items, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn episode_pool(&self) -> EpisodePool {
        EpisodePool::from_labels(&self.labels)
    }

    pub fn n_speakers(&self) -> usize {
        self.episode_pool().n_speakers()
    }

    pub fn subset(&self, indices: &[usize]) -> SpectrogramPool {
        SpectrogramPool {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// Keeps `n` items per speaker, drawn without replacement under `seed`.
    pub fn subsample_per_speaker(&self, n: usize, seed: u64) -> Result<SpectrogramPool> {
        let pool = self.episode_pool();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for k in 0..pool.n_speakers() {
            let members = pool.members(k);
            if members.len() < n {
                return Err(Error::InsufficientData(format!(
                    "speaker {} has {} items, {n} requested",
                    pool.labels()[k].name,
                    members.len()
                )));
            }
            let mut picked: Vec<usize> = sample(&mut rng, members.len(), n).into_iter().map(|i| members[i]).collect();
            picked.sort_unstable();
            keep.extend(picked);
        }
        Ok(self.subset(&keep))
    }

    /// Keeps the speakers whose label index satisfies `keep`; labels are
    /// re-indexed densely in the original order.
    pub fn filter_speakers(&self, keep: impl Fn(&SpeakerLabel) -> bool) -> SpectrogramPool {
        let mut kept: Vec<SpeakerLabel> = self.labels.iter().filter(|l| keep(l)).cloned().collect();
        kept.sort();
        kept.dedup();
        let mut out = SpectrogramPool::default();
        for i in 0..self.len() {
            if let Ok(new_index) = kept.binary_search(&self.labels[i]) {
                out.items.push(self.items[i].clone());
                out.labels.push(SpeakerLabel::new(self.labels[i].name.clone(), new_index));
                out.ids.push(self.ids[i].clone());
            }
        }
        out
    }

    /// Dense class index of every item, for classifier targets.
    pub fn targets(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub support: Vec<(Spectrogram, SpeakerLabel)>,
    pub query: Vec<(Spectrogram, SpeakerLabel)>,
    pub support_ids: Vec<String>,
    pub query_ids: Vec<String>,
}

pub fn sample_episode<R: Rng + ?Sized>(
    pool: &SpectrogramPool,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    let idx = sample_episode_indices(&pool.episode_pool(), n_way, k_shot, n_query, rng)?;
    let take = |list: &[(usize, usize)]| -> Vec<(Spectrogram, SpeakerLabel)> {
        list.iter().map(|&(i, _)| (pool.items[i].clone(), pool.labels[i].clone())).collect()
    };
    Ok(Episode {
        n_way,
        k_shot,
        n_query,
        support: take(&idx.support),
        query: take(&idx.query),
        support_ids: idx.support.iter().map(|&(i, _)| pool.ids[i].clone()).collect(),
        query_ids: idx.query.iter().map(|&(i, _)| pool.ids[i].clone()).collect(),
    })
}
