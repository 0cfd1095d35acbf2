use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::SpeakerLabel;
use crate::error::{Error, Result};

pub const MANIFEST_HEADER_PREFIX: &str = "#fssr-manifest v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: SpeakerLabel,
    pub path: PathBuf,
    /// Known when the manifest was built from audio; not stored in the file.
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::format("manifest", format!("unknown split {other:?}"))),
        }
    }
}

/// Start of the 3 s crop, frozen in seconds or drawn at load time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CropOffset {
    Fixed(f64),
    Random,
}

impl std::fmt::Display for CropOffset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CropOffset::Fixed(s) => write!(f, "{s}"),
            CropOffset::Random => f.write_str("random"),
        }
    }
}

impl FromStr for CropOffset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(CropOffset::Random);
        }
        match s.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => Ok(CropOffset::Fixed(v)),
            _ => Err(Error::format("manifest", format!("bad crop offset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utterance: Utterance,
    pub split: Split,
    pub crop_offset: CropOffset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub protocol_tag: String,
}

fn check_field(what: &str, value: &str) -> Result<()> {
    if value.is_empty() || value.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidConfig(format!("{what} {value:?} is empty or contains tabs/newlines")));
    }
    Ok(())
}

impl Manifest {
    /// Checks label density, id uniqueness and train/test disjointness.
    pub fn validate(&self) -> Result<()> {
        if self.protocol_tag.is_empty() || self.protocol_tag.contains(char::is_whitespace) {
            return Err(Error::InvalidConfig(format!("protocol tag {:?} must be non-empty without whitespace", self.protocol_tag)));
        }
        let mut names: BTreeMap<usize, &str> = BTreeMap::new();
        let mut indices: BTreeMap<&str, usize> = BTreeMap::new();
        let mut seen = HashSet::new();
        let mut train_ids = HashSet::new();
        let mut test_ids = HashSet::new();
        for e in &self.entries {
            let u = &e.utterance;
            check_field("utterance id", &u.id)?;
            check_field("speaker name", &u.speaker.name)?;
            check_field("path", &u.path.to_string_lossy())?;
            if let Some(d) = u.duration_s {
                if !(d > 0.0) {
                    return Err(Error::InvalidConfig(format!("utterance {} has duration {d}", u.id)));
                }
            }
            if *names.entry(u.speaker.index).or_insert(&u.speaker.name) != u.speaker.name
                || *indices.entry(&u.speaker.name).or_insert(u.speaker.index) != u.speaker.index
            {
                return Err(Error::InvalidConfig(format!("speaker {} has inconsistent index", u.speaker.name)));
            }
            if !seen.insert((u.speaker.name.as_str(), u.id.as_str())) {
                return Err(Error::InvalidConfig(format!("duplicate entry {} for {}", u.id, u.speaker.name)));
            }
            match e.split {
                Split::Train => train_ids.insert(u.id.as_str()),
                Split::Test => test_ids.insert(u.id.as_str()),
            };
        }
        if let Some(id) = train_ids.intersection(&test_ids).next() {
            return Err(Error::InvalidConfig(format!("utterance {id} is in both train and test")));
        }
        if names.keys().copied().ne(0..names.len()) {
            return Err(Error::InvalidConfig("speaker indices are not contiguous from 0".into()));
        }
        Ok(())
    }

    /// Speakers ordered by index.
    pub fn speakers(&self) -> Vec<SpeakerLabel> {
        let mut map = BTreeMap::new();
        for e in &self.entries {
            map.entry(e.utterance.speaker.index).or_insert_with(|| e.utterance.speaker.clone());
        }
        map.into_values().collect()
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers().len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Keeps the speakers with index `< n`.
    pub fn first_speakers(&self, n: usize) -> Result<Manifest> {
        if n > self.n_speakers() {
            return Err(Error::InsufficientData(format!("{n} speakers requested, manifest has {}", self.n_speakers())));
        }
        Ok(Manifest {
            entries: self.entries.iter().filter(|e| e.utterance.speaker.index < n).cloned().collect(),
            seed: self.seed,
            protocol_tag: self.protocol_tag.clone(),
        })
    }

    pub fn to_text(&self) -> Result<String> {
        self.validate()?;
        let mut s = format!("{MANIFEST_HEADER_PREFIX} seed={} protocol={}\n", self.seed, self.protocol_tag);
        for e in &self.entries {
            let u = &e.utterance;
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                u.id,
                u.speaker.name,
                u.speaker.index,
                u.path.display(),
                e.split.as_str(),
                e.crop_offset
            )
            .expect("writing to a string");
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("manifest", "empty file"))?;
        let rest = header
            .strip_prefix(MANIFEST_HEADER_PREFIX)
            .ok_or_else(|| Error::format("manifest", format!("bad header {header:?}")))?;
        let mut seed = None;
        let mut tag = None;
        for field in rest.split_whitespace() {
            if let Some(v) = field.strip_prefix("seed=") {
                seed = Some(v.parse::<u64>().map_err(|_| Error::format("manifest", format!("bad seed {v:?}")))?);
            } else if let Some(v) = field.strip_prefix("protocol=") {
                tag = Some(v.to_string());
            } else {
                return Err(Error::format("manifest", format!("unknown header field {field:?}")));
            }
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(Error::format("manifest", format!("line {}: expected 6 fields, got {}", n + 2, cols.len())));
            }
            let index = cols[2]
                .parse::<usize>()
                .map_err(|_| Error::format("manifest", format!("line {}: bad speaker index {:?}", n + 2, cols[2])))?;
            entries.push(ManifestEntry {
                utterance: Utterance {
                    id: cols[0].to_string(),
                    speaker: SpeakerLabel::new(cols[1], index),
                    path: PathBuf::from(cols[3]),
                    duration_s: None,
                },
                split: cols[4].parse()?,
                crop_offset: cols[5].parse()?,
            });
        }
        let manifest = Manifest {
            entries,
            seed: seed.ok_or_else(|| Error::format("manifest", "header lacks seed"))?,
            protocol_tag: tag.ok_or_else(|| Error::format("manifest", "header lacks protocol"))?,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        Manifest::parse(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, spk: &str, idx: usize, split: Split, crop: CropOffset) -> ManifestEntry {
        ManifestEntry {
            utterance: Utterance {
                id: id.into(),
                speaker: SpeakerLabel::new(spk, idx),
                path: PathBuf::from(format!("/data/{id}.wav")),
                duration_s: None,
            },
            split,
            crop_offset: crop,
        }
    }

    #[test]
    fn text_round_trip() {
        let m = Manifest {
            entries: vec![
                entry("a/1", "a", 0, Split::Train, CropOffset::Fixed(1.25)),
                entry("a/2", "a", 0, Split::Test, CropOffset::Fixed(0.1 + 0.2)),
                entry("b/1", "b", 1, Split::Train, CropOffset::Random),
            ],
            seed: 9,
            protocol_tag: "toy-v1".into(),
        };
        let text = m.to_text().unwrap();
        assert!(text.starts_with("#fssr-manifest v1 seed=9 protocol=toy-v1\n"));
        assert_eq!(Manifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn overlap_and_gaps_rejected() {
        let overlap = Manifest {
            entries: vec![
                entry("a/1", "a", 0, Split::Train, CropOffset::Fixed(0.0)),
                entry("a/1", "a", 0, Split::Test, CropOffset::Fixed(0.0)),
            ],
            seed: 0,
            protocol_tag: "t".into(),
        };
        assert!(overlap.validate().is_err());
        let gap = Manifest {
            entries: vec![entry("a/1", "a", 1, Split::Train, CropOffset::Fixed(0.0))],
            seed: 0,
            protocol_tag: "t".into(),
        };
        assert!(gap.validate().is_err());
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(Manifest::parse("#fssr-manifest v1 seed=1 protocol=x\na\tb\n").is_err());
        assert!(Manifest::parse("nonsense\n").is_err());
    }
}
