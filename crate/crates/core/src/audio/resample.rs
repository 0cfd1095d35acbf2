use crate::error::{Error, Result};

/// Zero crossings of the sinc kernel on each side, at the lower of the two rates.
const ZERO_CROSSINGS: usize = 32;
/// Kaiser window shape; ~86 dB stopband attenuation.
const KAISER_BETA: f64 = 8.6;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.945;

/// Rational-ratio polyphase resampler with a Kaiser-windowed sinc kernel.
///
/// The conversion `from -> to` is reduced to `up / down` by their gcd; one
/// filter phase is tabulated for each of the `up` fractional positions.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: usize,
    down: usize,
    half_taps: usize,
    /// `up` rows of `2 * half_taps` coefficients, each row summing to 1.
    phases: Vec<Vec<f64>>,
}

impl Resampler {
    pub fn new(from_hz: u32, to_hz: u32) -> Result<Self> {
        if from_hz == 0 || to_hz == 0 {
            return Err(Error::InvalidConfig(format!(
                "sample rates must be positive ({from_hz} -> {to_hz})"
            )));
        }
        let g = gcd(from_hz as usize, to_hz as usize);
        let up = to_hz as usize / g;
        let down = from_hz as usize / g;

        // Cutoff in cycles per input sample, times two.
        let cutoff = ROLLOFF * (up as f64 / down as f64).min(1.0);
        let half_taps = (ZERO_CROSSINGS as f64 / cutoff).ceil() as usize;
        let i0_beta = bessel_i0(KAISER_BETA);

        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut taps: Vec<f64> = (0..2 * half_taps)
                    .map(|t| {
                        // Tap t multiplies x[base + j] with j = t - half_taps + 1.
                        let j = t as f64 - half_taps as f64 + 1.0;
                        let tau = frac - j;
                        let u = tau / half_taps as f64;
                        if u.abs() > 1.0 {
                            return 0.0;
                        }
                        let window = bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta;
                        cutoff * sinc(cutoff * tau) * window
                    })
                    .collect();
                let sum: f64 = taps.iter().sum();
                for t in &mut taps {
                    *t /= sum;
                }
                taps
            })
            .collect();

        Ok(Self {
            up,
            down,
            half_taps,
            phases,
        })
    }

    pub fn ratio(&self) -> (usize, usize) {
        (self.up, self.down)
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        (input_len * self.up).div_ceil(self.down)
    }

    pub fn process(&self, input: &[f32]) -> Vec<f32> {
        if self.up == self.down {
            return input.to_vec();
        }
        let n_out = self.output_len(input.len());
        let n_in = input.len() as isize;
        (0..n_out)
            .map(|n| {
                let pos = n * self.down;
                let base = (pos / self.up) as isize;
                let taps = &self.phases[pos % self.up];
                let start = base - self.half_taps as isize + 1;
                let mut acc = 0.0f64;
                for (t, &h) in taps.iter().enumerate() {
                    let idx = start + t as isize;
                    if idx >= 0 && idx < n_in {
                        acc += h * input[idx as usize] as f64;
                    }
                }
                acc as f32
            })
            .collect()
    }
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= (half / k) * (half / k);
        sum += term;
        if term < sum * 1e-16 {
            return sum;
        }
        k += 1.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_reduce() {
        assert_eq!(Resampler::new(48_000, 16_000).unwrap().ratio(), (1, 3));
        assert_eq!(Resampler::new(44_100, 16_000).unwrap().ratio(), (160, 441));
        assert_eq!(Resampler::new(8_000, 16_000).unwrap().ratio(), (2, 1));
    }

    #[test]
    fn output_lengths() {
        let r = Resampler::new(48_000, 16_000).unwrap();
        assert_eq!(r.output_len(288_000), 96_000);
        let r = Resampler::new(8_000, 16_000).unwrap();
        assert_eq!(r.output_len(16_000), 32_000);
    }

    #[test]
    fn dc_passes_with_unit_gain() {
        let r = Resampler::new(44_100, 16_000).unwrap();
        let out = r.process(&vec![0.25f32; 44_100]);
        // Away from the edges the kernel is fully supported.
        for &s in &out[200..out.len() - 200] {
            assert!((s - 0.25).abs() < 1e-5, "{s}");
        }
    }

    #[test]
    fn bessel_matches_reference() {
        // I0(1) = 1.2660658777520082
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_2).abs() < 1e-14);
    }
}
