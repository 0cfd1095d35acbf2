//! Audio loading, standardization and spectrogram extraction.
//!
//! Every clip entering the pipeline is brought to single-channel 16 kHz
//! before any feature computation; nothing else (silence removal, gain
//! normalization, augmentation) is applied.

mod resample;
mod spectrogram;
mod tensor_file;

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub use resample::Resampler;
pub use spectrogram::{
    compute_spectrogram, normalize_bins, BinReduction, Magnitude, Spectrogram, StftConfig,
    SPECTROGRAM_BINS,
};
pub use tensor_file::{read_spectrogram, write_spectrogram, TENSOR_FILE_MAGIC, TENSOR_FILE_VERSION};

/// Sample rate every clip is converted to.
pub const TARGET_SAMPLE_RATE: u32 = 16_000;

/// Mono waveform with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn is_standardized(&self) -> bool {
        self.sample_rate_hz == TARGET_SAMPLE_RATE
    }
}

/// What [`random_crop`] does when the clip is shorter than the request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShortClipPolicy {
    #[default]
    Error,
    /// Loop the clip until it covers the requested duration.
    PadWithRepeat,
}

/// Decodes a wav file and converts it to mono 16 kHz.
///
/// Channels are averaged before resampling. Integer PCM is scaled by
/// `2^(bits-1)`, so 16-bit input at 16 kHz comes back as `sample / 32768`.
pub fn load_and_standardize(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let unreadable = |reason: String| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| unreadable(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.sample_rate == 0 {
        return Err(unreadable("invalid wav header".into()));
    }

    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(unreadable(format!(
                    "unsupported float width {}",
                    spec.bits_per_sample
                )));
            }
            reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| unreadable(e.to_string()))?
        }
        hound::SampleFormat::Int => {
            let bits = spec.bits_per_sample;
            if !(8..=32).contains(&bits) {
                return Err(unreadable(format!("unsupported PCM width {bits}")));
            }
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| unreadable(e.to_string()))?
        }
    };

    if interleaved.is_empty() {
        return Err(Error::EmptyAudio(path.display().to_string()));
    }

    let clip = AudioClip::new(
        downmix(&interleaved, spec.channels as usize),
        spec.sample_rate,
    );
    standardize(clip)
}

/// Resamples a mono clip to 16 kHz and clamps amplitudes to `[-1, 1]`.
pub fn standardize(clip: AudioClip) -> Result<AudioClip> {
    if clip.is_empty() {
        return Err(Error::EmptyAudio("clip".into()));
    }
    let mut samples = if clip.sample_rate_hz == TARGET_SAMPLE_RATE {
        clip.samples
    } else {
        Resampler::new(clip.sample_rate_hz, TARGET_SAMPLE_RATE)?.process(&clip.samples)
    };
    for s in &mut samples {
        *s = s.clamp(-1.0, 1.0);
    }
    Ok(AudioClip::new(samples, TARGET_SAMPLE_RATE))
}

fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    if channels == 1 {
        return interleaved.to_vec();
    }
    interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().map(|&s| s as f64).sum::<f64>() / channels as f64) as f32)
        .collect()
}

/// Number of samples covering `duration_s` at the clip's rate.
pub fn samples_for(duration_s: f64, sample_rate_hz: u32) -> usize {
    (duration_s * sample_rate_hz as f64).round() as usize
}

/// Draws a crop start uniformly from `0..=available - needed`.
pub fn draw_crop_offset<R: Rng + ?Sized>(
    available: usize,
    needed: usize,
    rng: &mut R,
) -> Option<usize> {
    (available >= needed).then(|| rng.random_range(0..=available - needed))
}

/// Contiguous segment `[offset, offset + len)`.
pub fn crop_at(clip: &AudioClip, offset: usize, len: usize) -> Result<AudioClip> {
    if offset + len > clip.len() {
        return Err(Error::ClipTooShort {
            needed: offset + len,
            available: clip.len(),
        });
    }
    Ok(AudioClip::new(
        clip.samples[offset..offset + len].to_vec(),
        clip.sample_rate_hz,
    ))
}

/// Tiles the clip until it holds at least `len` samples, then truncates.
pub fn repeat_to_length(clip: &AudioClip, len: usize) -> Result<AudioClip> {
    if clip.is_empty() {
        return Err(Error::EmptyAudio("clip".into()));
    }
    let samples = clip.samples.iter().copied().cycle().take(len).collect();
    Ok(AudioClip::new(samples, clip.sample_rate_hz))
}

/// Crops `duration_s` seconds at a uniformly random offset.
///
/// Clips shorter than the request fail with `ClipTooShort` unless the caller
/// opts into [`ShortClipPolicy::PadWithRepeat`].
pub fn random_crop<R: Rng + ?Sized>(
    clip: &AudioClip,
    duration_s: f64,
    rng: &mut R,
    policy: ShortClipPolicy,
) -> Result<AudioClip> {
    if !(duration_s > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "crop duration must be positive, got {duration_s}"
        )));
    }
    let needed = samples_for(duration_s, clip.sample_rate_hz);
    match draw_crop_offset(clip.len(), needed, rng) {
        Some(offset) => crop_at(clip, offset, needed),
        None => match policy {
            ShortClipPolicy::Error => Err(Error::ClipTooShort {
                needed,
                available: clip.len(),
            }),
            ShortClipPolicy::PadWithRepeat => repeat_to_length(clip, needed),
        },
    }
}
