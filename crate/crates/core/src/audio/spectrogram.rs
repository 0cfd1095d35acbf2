use std::sync::Arc;

use ndarray::Array2;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioClip, TARGET_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Frequency rows in every spectrogram fed to the networks.
pub const SPECTROGRAM_BINS: usize = 128;

/// How the one-sided FFT spectrum is reduced to 128 rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BinReduction {
    /// Keep FFT bins `1..=128` (DC dropped).
    #[default]
    TruncateLow128,
    /// Average FFT bins `(2b + 1, 2b + 2)` into row `b`.
    AveragePairs,
}

impl BinReduction {
    /// Row that FFT bin `k` lands in, if any.
    pub fn row_of_fft_bin(self, k: usize) -> Option<usize> {
        match self {
            BinReduction::TruncateLow128 => (1..=SPECTROGRAM_BINS).contains(&k).then(|| k - 1),
            BinReduction::AveragePairs => {
                (1..=2 * SPECTROGRAM_BINS).contains(&k).then(|| (k - 1) / 2)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Magnitude {
    #[default]
    Linear,
    /// `ln(|X| + 1e-6)`
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_length: usize,
    pub bin_reduction: BinReduction,
    pub magnitude: Magnitude,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            fft_length: 512,
            bin_reduction: BinReduction::TruncateLow128,
            magnitude: Magnitude::Linear,
        }
    }
}

impl StftConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * TARGET_SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * TARGET_SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    /// Frames produced for a clip of `n_samples`.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        n_samples / self.hop_samples()
    }

    pub fn validate(&self) -> Result<()> {
        let win = self.window_samples();
        if win == 0 || self.hop_samples() == 0 {
            return Err(Error::InvalidConfig("window and hop must be non-empty".into()));
        }
        if self.fft_length < win {
            return Err(Error::InvalidConfig(format!(
                "fft_length {} shorter than window {win}",
                self.fft_length
            )));
        }
        let needed = match self.bin_reduction {
            BinReduction::TruncateLow128 => SPECTROGRAM_BINS + 1,
            BinReduction::AveragePairs => 2 * SPECTROGRAM_BINS + 1,
        };
        if self.fft_length / 2 + 1 < needed {
            return Err(Error::InvalidConfig(format!(
                "fft_length {} yields too few bins for {:?}",
                self.fft_length, self.bin_reduction
            )));
        }
        Ok(())
    }
}

/// `bins x frames` magnitude matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<f32>,
    pub normalized: bool,
}

impl Spectrogram {
    pub fn new(values: Array2<f32>, normalized: bool) -> Self {
        Self { values, normalized }
    }

    pub fn zeros(frames: usize) -> Self {
        Self::new(Array2::zeros((SPECTROGRAM_BINS, frames)), true)
    }

    pub fn bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

/// Periodic Hamming window of length `n`.
fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reflect-padded sample access (edge sample not repeated).
fn reflect(samples: &[f32], idx: isize) -> f32 {
    let n = samples.len() as isize;
    let mut i = idx;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    samples[i.clamp(0, n - 1) as usize]
}

/// Short-time magnitude spectrum.
///
/// Frame `t` is centred on sample `t * hop` (the signal is reflect-padded by
/// half a window at both ends) and `t` runs over `0..n_samples / hop`, so a
/// 3 s clip at 16 kHz gives exactly 300 frames. Each 400-sample Hamming
/// frame is zero-padded to `fft_length` before the FFT.
pub fn compute_spectrogram(clip: &AudioClip, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if clip.sample_rate_hz != TARGET_SAMPLE_RATE {
        return Err(Error::InvalidConfig(format!(
            "clip must be standardized to {TARGET_SAMPLE_RATE} Hz, got {}",
            clip.sample_rate_hz
        )));
    }
    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    if clip.len() < win {
        return Err(Error::ClipTooShort {
            needed: win,
            available: clip.len(),
        });
    }

    let frames = cfg.frame_count(clip.len());
    let window = hamming(win);
    let fft: Arc<dyn Fft<f32>> = FftPlanner::new().plan_fft_forward(cfg.fft_length);
    let mut buf = vec![Complex::new(0.0f32, 0.0); cfg.fft_length];
    let mut scratch = vec![Complex::new(0.0f32, 0.0); fft.get_inplace_scratch_len()];
    let mut values = Array2::<f32>::zeros((SPECTROGRAM_BINS, frames));
    let half = (win / 2) as isize;

    for t in 0..frames {
        let start = (t * hop) as isize - half;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < win {
                Complex::new((reflect(&clip.samples, start + i as isize) as f64 * window[i]) as f32, 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);

        let mut column = values.column_mut(t);
        match cfg.bin_reduction {
            BinReduction::TruncateLow128 => {
                for (row, v) in column.iter_mut().enumerate() {
                    *v = buf[row + 1].norm();
                }
            }
            BinReduction::AveragePairs => {
                for (row, v) in column.iter_mut().enumerate() {
                    *v = 0.5 * (buf[2 * row + 1].norm() + buf[2 * row + 2].norm());
                }
            }
        }
        if cfg.magnitude == Magnitude::Log {
            column.mapv_inplace(|m| (m + 1e-6).ln());
        }
    }
    Ok(Spectrogram::new(values, false))
}

/// Standardizes every frequency row to zero mean and unit (population)
/// variance over time. Rows with variance below `1e-12` become all-zero.
pub fn normalize_bins(spec: &Spectrogram) -> Result<Spectrogram> {
    if spec.normalized {
        return Err(Error::AlreadyNormalized);
    }
    let mut values = spec.values.clone();
    for mut row in values.rows_mut() {
        let n = row.len() as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        if var < 1e-12 {
            row.fill(0.0);
        } else {
            let inv = 1.0 / var.sqrt();
            row.mapv_inplace(|v| ((v as f64 - mean) * inv) as f32);
        }
    }
    Ok(Spectrogram::new(values, true))
}

/// Row statistics consistent with [`normalize_bins`] output.
pub(crate) fn looks_normalized(values: &Array2<f32>) -> bool {
    values.rows().into_iter().all(|row| {
        let n = row.len() as f64;
        if row.iter().all(|&v| v == 0.0) {
            return true;
        }
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        mean.abs() < 1e-5 && (var.sqrt() - 1.0).abs() < 1e-4
    })
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn z_scores_small_row() {
        let spec = Spectrogram::new(array![[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]], false);
        let out = normalize_bins(&spec).unwrap();
        let expected = [-1.224_744_9, 0.0, 1.224_744_9];
        for (got, want) in out.values.row(0).iter().zip(expected) {
            assert!((got - want).abs() < 1e-6);
        }
        assert!(out.values.row(1).iter().all(|&v| v == 0.0));
        assert!(out.normalized);
    }

    #[test]
    fn second_normalization_is_rejected() {
        let spec = Spectrogram::new(array![[1.0, 2.0]], false);
        let once = normalize_bins(&spec).unwrap();
        assert!(matches!(normalize_bins(&once), Err(Error::AlreadyNormalized)));
    }

    #[test]
    fn three_seconds_give_300_frames() {
        let clip = AudioClip::new(vec![0.0; 48_000], 16_000);
        let spec = compute_spectrogram(&clip, &StftConfig::default()).unwrap();
        assert_eq!(spec.shape(), (128, 300));
        assert!(spec.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_sub_window_clip() {
        let clip = AudioClip::new(vec![0.0; 399], 16_000);
        assert!(matches!(
            compute_spectrogram(&clip, &StftConfig::default()),
            Err(Error::ClipTooShort { needed: 400, .. })
        ));
    }

    #[test]
    fn rejects_short_fft() {
        let cfg = StftConfig {
            fft_length: 256,
            ..StftConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bin_mapping() {
        assert_eq!(BinReduction::TruncateLow128.row_of_fft_bin(0), None);
        assert_eq!(BinReduction::TruncateLow128.row_of_fft_bin(32), Some(31));
        assert_eq!(BinReduction::TruncateLow128.row_of_fft_bin(129), None);
        assert_eq!(BinReduction::AveragePairs.row_of_fft_bin(31), Some(15));
        assert_eq!(BinReduction::AveragePairs.row_of_fft_bin(32), Some(15));
    }
}
