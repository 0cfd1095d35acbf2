//! Reproducible manifests, spectrogram pools and episode sampling.

mod cache;
mod episode;
mod manifest;
mod vctk;
mod voxceleb;

use serde::{Deserialize, Serialize};

pub use cache::{load_entry_spectrogram, PoolLoader, SpectrogramCache, CACHE_DIR_ENV};
pub use episode::{sample_episode, sample_episode_indices, Episode, EpisodeIndices, EpisodePool, SpectrogramPool};
pub use manifest::{CropOffset, Manifest, ManifestEntry, Split, Utterance, MANIFEST_HEADER_PREFIX};
pub use vctk::build_vctk_split;
pub use voxceleb::{build_voxceleb_split, VOXCELEB_TRAIN_CODE, VOXCELEB_TEST_CODE};

/// Length of every training and evaluation crop.
pub const CROP_SECONDS: f64 = 3.0;

/// Speaker name plus its dense index within one manifest.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpeakerLabel {
    pub name: String,
    pub index: usize,
}

impl SpeakerLabel {
    pub fn new(name: impl Into<String>, index: usize) -> Self {
        Self {
            name: name.into(),
            index,
        }
    }
}

/// Duration in seconds read from a wav header, without decoding samples.
pub fn wav_duration_s(path: &std::path::Path) -> crate::Result<f64> {
    let reader = hound::WavReader::open(path).map_err(|e| crate::Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let spec = reader.spec();
    Ok(reader.duration() as f64 / spec.sample_rate as f64)
}
