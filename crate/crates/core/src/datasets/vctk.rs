use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::voxceleb::draw_offset_s;
use super::{wav_duration_s, CropOffset, Manifest, ManifestEntry, SpeakerLabel, Split, Utterance};
use crate::error::{Error, Result};

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Number of training utterances for a speaker with `n` utterances.
pub(crate) fn train_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction + 1e-9).floor() as usize).clamp(1, n - 1)
}

/// Per-speaker utterance-level split. Speakers are the sub-directories of
/// `root/wav48` (or of `root`), in lexicographic order; each utterance
/// gets one crop offset, 0 when it is shorter than the crop.
pub fn build_vctk_split(root: &Path, train_fraction: f64, seed: u64) -> Result<Manifest> {
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let audio_root = if root.join("wav48").is_dir() { root.join("wav48") } else { root.to_path_buf() };
    let speakers: Vec<PathBuf> = sorted_dir(&audio_root)?.into_iter().filter(|p| p.is_dir()).collect();
    if speakers.len() < 2 {
        return Err(Error::InsufficientData(format!("{} holds fewer than 2 speaker directories", audio_root.display())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (index, dir) in speakers.iter().enumerate() {
        let name = dir.file_name().expect("directory entry").to_string_lossy().into_owned();
        let label = SpeakerLabel::new(name.clone(), index);
        let mut files: Vec<PathBuf> = sorted_dir(dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
            .collect();
        if files.len() < 2 {
            return Err(Error::InsufficientData(format!("speaker {name} has {} utterances, 2 needed", files.len())));
        }
        let n_train = train_count(files.len(), train_fraction);
        files.shuffle(&mut rng);
        for (i, path) in files.into_iter().enumerate() {
            let dur = wav_duration_s(&path)?;
            let stem = path.file_stem().expect("wav file").to_string_lossy().into_owned();
            let offset = draw_offset_s(dur, &mut rng).unwrap_or(0.0);
            entries.push(ManifestEntry {
                utterance: Utterance {
                    id: format!("{name}/{stem}"),
                    speaker: label.clone(),
                    path,
                    duration_s: Some(dur),
                },
                split: if i < n_train { Split::Train } else { Split::Test },
                crop_offset: CropOffset::Fixed(offset),
            });
        }
    }
    entries.sort_by(|a, b| {
        (a.utterance.speaker.index, a.split, &a.utterance.id).cmp(&(b.utterance.speaker.index, b.split, &b.utterance.id))
    });
    let manifest = Manifest {
        entries,
        seed,
        protocol_tag: format!("vctk-utterance-split-{train_fraction}"),
    };
    manifest.validate()?;
    Ok(manifest)
}
