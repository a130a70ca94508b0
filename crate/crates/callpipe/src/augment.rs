//! Waveform-level stochastic augmentations.
//!
//! Augmentations run on the raw signal before preprocessing and never touch
//! the label. All of them preserve length and sample rate, and are
//! bit-deterministic given an RNG state. Chains apply a master gate
//! probability first, then each entry independently with its own
//! probability, in configuration order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// One augmentation with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Augmentation {
    /// Additive Gaussian noise; the noise variance is scaled by the input
    /// signal variance so the drawn SNR is meaningful. The SNR in dB is
    /// drawn uniformly from `[snr_db_min, snr_db_max]` per application.
    GaussianNoise { snr_db_min: f64, snr_db_max: f64 },
    /// Zero one contiguous run of samples, up to this fraction of the
    /// waveform.
    TimeMask { max_mask_frac: f64 },
    /// Zero a random band of the signal's spectrum, up to this width.
    FreqMask { max_band_hz: f64 },
}

/// An augmentation plus its independent application probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainEntry {
    pub augmentation: Augmentation,
    pub p: f64,
}

/// An ordered augmentation chain with a master gate probability.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentationChain {
    pub entries: Vec<ChainEntry>,
    /// With probability `1 - train_aug_p` the chain is skipped entirely.
    pub train_aug_p: f64,
}

impl AugmentationChain {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        if !in_unit(self.train_aug_p) {
            return Err(Error::InvalidArgument("train_aug_p must be in [0, 1]".into()));
        }
        for entry in &self.entries {
            if !in_unit(entry.p) {
                return Err(Error::InvalidArgument("augmentation p must be in [0, 1]".into()));
            }
            match entry.augmentation {
                Augmentation::GaussianNoise { snr_db_min, snr_db_max } => {
                    if snr_db_min > snr_db_max {
                        return Err(Error::InvalidArgument("snr_db_min > snr_db_max".into()));
                    }
                }
                Augmentation::TimeMask { max_mask_frac } => {
                    if !(0.0 < max_mask_frac && max_mask_frac <= 1.0) {
                        return Err(Error::InvalidArgument(
                            "max_mask_frac must be in (0, 1]".into(),
                        ));
                    }
                }
                Augmentation::FreqMask { max_band_hz } => {
                    if max_band_hz <= 0.0 {
                        return Err(Error::InvalidArgument("max_band_hz must be positive".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

fn variance(wave: &[f32]) -> f64 {
    if wave.len() < 2 {
        return 0.0;
    }
    let n = wave.len() as f64;
    let mean = wave.iter().map(|&v| v as f64).sum::<f64>() / n;
    wave.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
}

/// Adds i.i.d. Gaussian noise scaled so that
/// `var(noise) = var(wave) / 10^(snr_db / 10)`.
///
/// Waves with fewer than 2 samples or zero variance pass through unchanged.
pub fn add_gaussian_noise(wave: &[f32], snr_db: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let var = variance(wave);
    if var <= 0.0 {
        return wave.to_vec();
    }
    let scale = (var / 10f64.powf(snr_db / 10.0)).sqrt();
    wave.iter()
        .map(|&v| {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            (v as f64 + n * scale) as f32
        })
        .collect()
}

/// Zeroes the samples `start..start + width`; everything else is
/// bit-identical to the input.
pub fn time_mask_at(wave: &[f32], start: usize, width: usize) -> Vec<f32> {
    let mut out = wave.to_vec();
    let begin = start.min(out.len());
    let end = (start + width).min(out.len());
    for v in &mut out[begin..end] {
        *v = 0.0;
    }
    out
}

/// Zeroes one random contiguous run: width drawn uniformly from
/// `{0, ..., floor(max_mask_frac · len)}`, start uniformly over valid
/// positions.
pub fn time_mask(wave: &[f32], max_mask_frac: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    if wave.is_empty() {
        return Vec::new();
    }
    let max_width = (max_mask_frac * wave.len() as f64).floor() as usize;
    let width = rng.gen_range(0..=max_width);
    let start = rng.gen_range(0..=wave.len() - width);
    time_mask_at(wave, start, width)
}

/// Zeroes all spectral bins whose frequency falls in `[f0_hz, f0_hz + band_hz]`
/// (and their conjugate mirrors) via a full-length FFT round trip.
pub fn freq_mask_band(wave: &[f32], sample_rate: u32, f0_hz: f64, band_hz: f64) -> Vec<f32> {
    let n = wave.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);

    let mut buf: Vec<Complex<f64>> =
        wave.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    fft.process(&mut buf);

    let hz_per_bin = sample_rate as f64 / n as f64;
    let hi = f0_hz + band_hz;
    for k in 0..=n / 2 {
        let f = k as f64 * hz_per_bin;
        if f >= f0_hz && f <= hi {
            buf[k] = Complex::new(0.0, 0.0);
            if k > 0 && k < n - k {
                buf[n - k] = Complex::new(0.0, 0.0);
            }
        }
    }

    ifft.process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter().map(|c| (c.re * scale) as f32).collect()
}

/// Random frequency-band masking: band width drawn uniformly from
/// `(0, max_band_hz)`, band start uniformly from `(0, nyquist - width)`.
pub fn freq_mask(wave: &[f32], sample_rate: u32, max_band_hz: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    if wave.is_empty() {
        return Vec::new();
    }
    let nyquist = sample_rate as f64 / 2.0;
    let band = rng.gen_range(0.0..max_band_hz.min(nyquist));
    let f0 = rng.gen_range(0.0..(nyquist - band).max(f64::MIN_POSITIVE));
    freq_mask_band(wave, sample_rate, f0, band)
}

/// Applies a chain: with probability `1 - train_aug_p` the wave passes
/// through untouched; otherwise each entry fires independently with its
/// own probability, in order.
pub fn apply_chain(
    wave: &[f32],
    chain: &AugmentationChain,
    sample_rate: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    if rng.gen_range(0.0..1.0) >= chain.train_aug_p {
        return wave.to_vec();
    }
    let mut out = wave.to_vec();
    for entry in &chain.entries {
        if rng.gen_range(0.0..1.0) >= entry.p {
            continue;
        }
        out = match entry.augmentation {
            Augmentation::GaussianNoise { snr_db_min, snr_db_max } => {
                let snr = if snr_db_max > snr_db_min {
                    rng.gen_range(snr_db_min..snr_db_max)
                } else {
                    snr_db_min
                };
                add_gaussian_noise(&out, snr, rng)
            }
            Augmentation::TimeMask { max_mask_frac } => time_mask(&out, max_mask_frac, rng),
            Augmentation::FreqMask { max_band_hz } => {
                freq_mask(&out, sample_rate, max_band_hz, rng)
            }
        };
    }
    out
}
