use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{CropOffset, Manifest, ManifestEntry, SpectrogramPool, Split, CROP_SECONDS};
use crate::audio::{
    compute_spectrogram, crop_at, load_and_standardize, normalize_bins, random_crop, read_spectrogram,
    repeat_to_length, samples_for, write_spectrogram, AudioClip, ShortClipPolicy, Spectrogram, StftConfig,
    TARGET_SAMPLE_RATE,
};
use crate::error::{Error, Result};

pub const CACHE_DIR_ENV: &str = "FSSR_CACHE_DIR";

/// Directory of normalized spectrogram files keyed by utterance id and
/// crop offset. Files appear atomically, so readers never see partial data.
#[derive(Debug, Clone)]
pub struct SpectrogramCache {
    dir: PathBuf,
}

fn encode_key(id: &str, offset_samples: usize) -> String {
    let mut out = String::with_capacity(id.len() + 16);
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'.' || b == b'-' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    format!("{out}@{offset_samples}.fssr")
}

impl SpectrogramCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    /// Cache rooted at `$FSSR_CACHE_DIR`, if set.
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(d) if !d.is_empty() => Ok(Some(Self::new(PathBuf::from(d))?)),
            _ => Ok(None),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, id: &str, offset_samples: usize) -> PathBuf {
        self.dir.join(encode_key(id, offset_samples))
    }

    pub fn get(&self, id: &str, offset_samples: usize) -> Result<Option<Spectrogram>> {
        let path = self.path_for(id, offset_samples);
        match File::open(&path) {
            Ok(f) => Ok(Some(read_spectrogram(BufReader::new(f))?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn put(&self, id: &str, offset_samples: usize, spec: &Spectrogram) -> Result<()> {
        let tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        {
            let mut w = BufWriter::new(tmp.as_file());
            write_spectrogram(&mut w, spec)?;
            w.flush()?;
        }
        tmp.persist(self.path_for(id, offset_samples)).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }
}

fn crop_clip(clip: &AudioClip, offset_samples: usize, policy: ShortClipPolicy) -> Result<AudioClip> {
    let len = samples_for(CROP_SECONDS, TARGET_SAMPLE_RATE);
    match crop_at(clip, offset_samples, len) {
        Ok(c) => Ok(c),
        Err(e) => match policy {
            ShortClipPolicy::PadWithRepeat if clip.len() < len => repeat_to_length(clip, len),
            _ => Err(e),
        },
    }
}

/// Loads, crops, transforms and normalizes one manifest entry.
pub fn load_entry_spectrogram(
    entry: &ManifestEntry,
    stft: &StftConfig,
    policy: ShortClipPolicy,
    rng_seed: u64,
) -> Result<Spectrogram> {
    let clip = load_and_standardize(&entry.utterance.path)?;
    let cropped = match entry.crop_offset {
        CropOffset::Fixed(s) => crop_clip(&clip, (s * TARGET_SAMPLE_RATE as f64).round() as usize, policy)?,
        CropOffset::Random => random_crop(&clip, CROP_SECONDS, &mut ChaCha8Rng::seed_from_u64(rng_seed), policy)?,
    };
    normalize_bins(&compute_spectrogram(&cropped, stft)?)
}

/// Turns manifest splits into spectrogram pools, optionally through a cache.
#[derive(Debug, Clone, Default)]
pub struct PoolLoader {
    pub stft: StftConfig,
    pub policy: ShortClipPolicy,
    pub cache: Option<SpectrogramCache>,
}

impl PoolLoader {
    pub fn new(stft: StftConfig, policy: ShortClipPolicy, cache: Option<SpectrogramCache>) -> Self {
        Self { stft, policy, cache }
    }

    /// Loads one split; item order follows the manifest, independent of
    /// how many worker threads run.
    pub fn load(&self, manifest: &Manifest, split: Split) -> Result<SpectrogramPool> {
        let entries: Vec<(usize, &ManifestEntry)> =
            manifest.entries.iter().enumerate().filter(|(_, e)| e.split == split).collect();
        if entries.is_empty() {
            return Err(Error::InsufficientData(format!("manifest has no {} entries", split.as_str())));
        }
        let items = entries
            .par_iter()
            .map(|&(i, e)| self.load_one(manifest, i, e))
            .collect::<Result<Vec<_>>>()?;
        SpectrogramPool::new(
            items,
            entries.iter().map(|(_, e)| e.utterance.speaker.clone()).collect(),
            entries.iter().map(|(_, e)| e.utterance.id.clone()).collect(),
        )
    }

    fn load_one(&self, manifest: &Manifest, index: usize, entry: &ManifestEntry) -> Result<Spectrogram> {
        let seed = manifest.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let key = match entry.crop_offset {
            CropOffset::Fixed(s) => Some((s * TARGET_SAMPLE_RATE as f64).round() as usize),
            CropOffset::Random => None,
        };
        if let (Some(cache), Some(off)) = (&self.cache, key) {
            if let Some(spec) = cache.get(&entry.utterance.id, off)? {
                return Ok(spec);
            }
            let spec = load_entry_spectrogram(entry, &self.stft, self.policy, seed)?;
            cache.put(&entry.utterance.id, off, &spec)?;
            return Ok(spec);
        }
        load_entry_spectrogram(entry, &self.stft, self.policy, seed)
    }
}
