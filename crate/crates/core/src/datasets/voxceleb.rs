use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{wav_duration_s, CropOffset, Manifest, ManifestEntry, SpeakerLabel, Split, Utterance, CROP_SECONDS};
use crate::audio::TARGET_SAMPLE_RATE;
use crate::error::{Error, Result};

/// Split-list codes used by the identification protocol file.
pub const VOXCELEB_TRAIN_CODE: u32 = 1;
pub const VOXCELEB_TEST_CODE: u32 = 3;

const SPLIT_FILE: &str = "iden_split.txt";

fn find_split_file(root: &Path) -> Result<PathBuf> {
    [root.join(SPLIT_FILE), root.join("meta").join(SPLIT_FILE)]
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| Error::InsufficientData(format!("no {SPLIT_FILE} under {}", root.display())))
}

fn resolve_audio(root: &Path, rel: &str) -> PathBuf {
    let under_wav = root.join("wav").join(rel);
    if under_wav.is_file() {
        under_wav
    } else {
        root.join(rel)
    }
}

/// Offset in seconds, quantized to the 16 kHz grid, for a clip of `duration_s`.
pub(crate) fn draw_offset_s<R: Rng + ?Sized>(duration_s: f64, rng: &mut R) -> Option<f64> {
    let slack = ((duration_s - CROP_SECONDS) * TARGET_SAMPLE_RATE as f64).floor();
    (slack >= 0.0).then(|| rng.random_range(0..=slack as u64) as f64 / TARGET_SAMPLE_RATE as f64)
}

/// Few-shot protocol over the first `n_classes` speakers (lexicographic id
/// order): `k_per_class` crops from distinct training files per speaker,
/// one crop per test file.
pub fn build_voxceleb_split(root: &Path, n_classes: usize, k_per_class: usize, seed: u64) -> Result<Manifest> {
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    if n_classes < 2 || k_per_class < 1 {
        return Err(Error::InvalidConfig(format!("n_classes {n_classes} / k_per_class {k_per_class} out of range")));
    }
    let list = fs::read_to_string(find_split_file(root)?)?;
    let mut by_speaker: BTreeMap<String, (Vec<String>, Vec<String>)> = BTreeMap::new();
    for (n, line) in list.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (code, rel) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::format("split list", format!("line {}: {line:?}", n + 1)))?;
        let code: u32 = code
            .parse()
            .map_err(|_| Error::format("split list", format!("line {}: bad code {code:?}", n + 1)))?;
        let rel = rel.trim().to_string();
        let speaker = rel
            .split('/')
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::format("split list", format!("line {}: no speaker in {rel:?}", n + 1)))?
            .to_string();
        let slot = by_speaker.entry(speaker).or_default();
        match code {
            VOXCELEB_TRAIN_CODE => slot.0.push(rel),
            VOXCELEB_TEST_CODE => slot.1.push(rel),
            _ => {}
        }
    }
    if by_speaker.len() < n_classes {
        return Err(Error::InsufficientData(format!(
            "{n_classes} speakers requested, split list has {}",
            by_speaker.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (index, (name, (mut train, mut test))) in by_speaker.into_iter().take(n_classes).enumerate() {
        let label = SpeakerLabel::new(name.clone(), index);
        train.sort();
        test.sort();
        let mut usable = Vec::new();
        for rel in &train {
            let path = resolve_audio(root, rel);
            let dur = wav_duration_s(&path)?;
            if dur >= CROP_SECONDS {
                usable.push((rel, path, dur));
            }
        }
        if usable.len() < k_per_class {
            return Err(Error::InsufficientData(format!(
                "speaker {name} has {} training files of at least {CROP_SECONDS} s, {k_per_class} needed",
                usable.len()
            )));
        }
        usable.shuffle(&mut rng);
        usable.truncate(k_per_class);
        usable.sort_by(|a, b| a.0.cmp(b.0));
        for (rel, path, dur) in usable {
            let offset = draw_offset_s(dur, &mut rng).expect("duration checked");
            entries.push(entry(rel, &label, path, dur, Split::Train, offset));
        }
        let mut n_test = 0;
        for rel in &test {
            let path = resolve_audio(root, rel);
            let dur = wav_duration_s(&path)?;
            if let Some(offset) = draw_offset_s(dur, &mut rng) {
                entries.push(entry(rel, &label, path, dur, Split::Test, offset));
                n_test += 1;
            }
        }
        if n_test == 0 {
            return Err(Error::InsufficientData(format!("speaker {name} has no usable test file")));
        }
    }
    let manifest = Manifest {
        entries,
        seed,
        protocol_tag: format!("voxceleb1-iden-first{n_classes}-lex-k{k_per_class}"),
    };
    manifest.validate()?;
    Ok(manifest)
}

fn entry(rel: &str, label: &SpeakerLabel, path: PathBuf, dur: f64, split: Split, offset: f64) -> ManifestEntry {
    ManifestEntry {
        utterance: Utterance {
            id: rel.strip_suffix(".wav").unwrap_or(rel).to_string(),
            speaker: label.clone(),
            path,
            duration_s: Some(dur),
        },
        split,
        crop_offset: CropOffset::Fixed(offset),
    }
}
