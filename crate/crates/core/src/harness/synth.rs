//! Multi-harmonic tone corpus with a per-speaker pitch and formant pattern.

use std::f64::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::audio::{compute_spectrogram, normalize_bins, AudioClip, StftConfig, TARGET_SAMPLE_RATE};
use crate::datasets::{SpeakerLabel, SpectrogramPool};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub duration_s: f64,
    /// Noise standard deviation relative to the signal RMS.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utterances_per_speaker: 12,
            duration_s: 3.0,
            noise: 0.1,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voice {
    pub label: SpeakerLabel,
    pub f0_hz: f64,
    pub formants_hz: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub voices: Vec<Voice>,
}

const FORMANT_BANDS: [(f64, f64); 3] = [(300.0, 900.0), (900.0, 2200.0), (2200.0, 3600.0)];
const FORMANT_WIDTH_HZ: f64 = 150.0;

impl SyntheticCorpus {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        if config.n_speakers < 2 || config.utterances_per_speaker == 0 || !(config.duration_s > 0.0) {
            return Err(Error::InvalidConfig(format!("degenerate synthetic corpus {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.n_speakers;
        let voices = (0..n)
            .map(|k| {
                let spread = k as f64 / (n - 1) as f64;
                let f0_hz = 90.0 * 3f64.powf(spread) * rng.random_range(0.98..1.02);
                let formants_hz = FORMANT_BANDS.map(|(lo, hi)| rng.random_range(lo..hi));
                Voice {
                    label: SpeakerLabel::new(format!("spk{k:02}"), k),
                    f0_hz,
                    formants_hz,
                }
            })
            .collect();
        Ok(Self { config, voices })
    }

    pub fn utterance_id(&self, speaker: usize, utt: usize) -> String {
        format!("{}/synth/{utt:03}", self.voices[speaker].label.name)
    }

    /// Deterministic in `(seed, speaker, utt)`.
    pub fn clip(&self, speaker: usize, utt: usize) -> AudioClip {
        let v = &self.voices[speaker];
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5EED_C0DE);
        rng.set_stream((speaker * 100_000 + utt) as u64);
        let sr = TARGET_SAMPLE_RATE as f64;
        let n = (self.config.duration_s * sr).round() as usize;
        let f0 = v.f0_hz * rng.random_range(0.97..1.03);
        let vib_rate = rng.random_range(3.0..6.0);
        let vib_depth = rng.random_range(0.005..0.015);
        let n_harm = (7000.0 / f0).floor() as usize;
        let amps: Vec<f64> = (1..=n_harm)
            .map(|h| {
                let f = h as f64 * f0;
                let res: f64 = v
                    .formants_hz
                    .iter()
                    .map(|&fm| (-0.5 * ((f - fm) / FORMANT_WIDTH_HZ).powi(2)).exp())
                    .sum();
                (res + 0.03) / (h as f64).sqrt()
            })
            .collect();
        let phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..TAU)).collect();
        let mut out = vec![0.0f64; n];
        let mut phase = 0.0f64;
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let inst = f0 * (1.0 + vib_depth * (TAU * vib_rate * t).sin());
            phase += TAU * inst / sr;
            let env = 0.6 + 0.4 * (TAU * 1.3 * t).sin().abs();
            *o = env * amps.iter().zip(&phases).enumerate().map(|(h, (a, p))| a * ((h + 1) as f64 * phase + p).sin()).sum::<f64>();
        }
        let rms = (out.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt().max(1e-12);
        let noise = Normal::new(0.0, self.config.noise).expect("finite sigma");
        let samples = out.iter().map(|x| (0.3 * x / rms + 0.3 * noise.sample(&mut rng)) as f32).collect();
        AudioClip::new(samples, TARGET_SAMPLE_RATE)
    }

    /// Normalized spectrograms of the first `duration_s` of every utterance.
    pub fn spectrogram_pool(&self, stft: &StftConfig) -> Result<SpectrogramPool> {
        let u = self.config.utterances_per_speaker;
        let keys: Vec<(usize, usize)> = (0..self.voices.len()).flat_map(|s| (0..u).map(move |j| (s, j))).collect();
        let items = keys
            .par_iter()
            .map(|&(s, j)| normalize_bins(&compute_spectrogram(&self.clip(s, j), stft)?))
            .collect::<Result<Vec<_>>>()?;
        SpectrogramPool::new(
            items,
            keys.iter().map(|&(s, _)| self.voices[s].label.clone()).collect(),
            keys.iter().map(|&(s, j)| self.utterance_id(s, j)).collect(),
        )
    }

    /// Writes 16-bit wavs as `<root>/wav/<speaker>/synth/<nnn>.wav` plus an
    /// identification split list marking the last `test_per_speaker`
    /// utterances of each speaker as test.
    pub fn write_corpus(&self, root: &Path, test_per_speaker: usize) -> Result<Vec<PathBuf>> {
        let u = self.config.utterances_per_speaker;
        if test_per_speaker >= u {
            return Err(Error::InvalidConfig(format!("{test_per_speaker} test utterances of {u}")));
        }
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: TARGET_SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut paths = Vec::new();
        let mut list = String::new();
        for s in 0..self.voices.len() {
            for j in 0..u {
                let rel = format!("{}.wav", self.utterance_id(s, j));
                let path = root.join("wav").join(&rel);
                fs::create_dir_all(path.parent().expect("has parent"))?;
                let mut w = hound::WavWriter::create(&path, spec).map_err(|e| Error::format("wav", e.to_string()))?;
                for x in &self.clip(s, j).samples {
                    w.write_sample((x.clamp(-1.0, 1.0) * 32767.0).round() as i16)
                        .map_err(|e| Error::format("wav", e.to_string()))?;
                }
                w.finalize().map_err(|e| Error::format("wav", e.to_string()))?;
                let code = if j + test_per_speaker >= u { 3 } else { 1 };
                list.push_str(&format!("{code} {rel}\n"));
                paths.push(path);
            }
        }
        fs::File::create(root.join("iden_split.txt"))?.write_all(list.as_bytes())?;
        Ok(paths)
    }
}
