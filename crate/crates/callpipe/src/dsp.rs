//! Time–frequency transforms and normalizations.
//!
//! The spectro-temporal frontend: short-time Fourier transform over
//! centered, reflection-padded frames with a periodic Hann window; power
//! spectrogram; decibel scaling; triangular mel filterbanks on the
//! `2595·log10(1 + f/700)` curve; per-channel energy normalization (PCEN);
//! and the three data normalizations (peak, unit, sliding-window).

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// How the values of a [`TimeFreqGrid`] are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GridScale {
    Power,
    Db,
    Mel,
    Pcen,
    Normalized,
}

/// A 2-D time×frequency array with axis metadata.
///
/// Values are stored row-major with one row per frequency bin:
/// `values[bin * frames + frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeFreqGrid {
    pub values: Vec<f32>,
    pub bins: usize,
    pub frames: usize,
    /// Hz per linear bin, or mel band centers for mel-scaled grids.
    pub bin_hz: BinAxis,
    /// Seconds between adjacent frames.
    pub frame_hop_s: f64,
    pub scale: GridScale,
}

/// Frequency-axis description.
#[derive(Debug, Clone, PartialEq)]
pub enum BinAxis {
    /// Linear bins: `bin k` is centered at `k * hz_per_bin`.
    Linear { hz_per_bin: f64 },
    /// Mel bands with explicit center frequencies in Hz.
    MelCenters(Vec<f64>),
}

impl TimeFreqGrid {
    pub fn at(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * self.frames + frame]
    }

    pub fn row(&self, bin: usize) -> &[f32] {
        &self.values[bin * self.frames..(bin + 1) * self.frames]
    }
}

/// Complex STFT output: `nfft/2 + 1` rows of spectra, one column per frame.
#[derive(Debug, Clone)]
pub struct ComplexGrid {
    pub values: Vec<Complex<f64>>,
    pub bins: usize,
    pub frames: usize,
    pub hz_per_bin: f64,
    pub frame_hop_s: f64,
}

impl ComplexGrid {
    pub fn at(&self, bin: usize, frame: usize) -> Complex<f64> {
        self.values[bin * self.frames + frame]
    }
}

/// Periodic Hann window: `0.5 * (1 - cos(2πn/N))`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Reflection index (no edge duplication), librosa-style centering.
fn reflect(i: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as i64 {
        j = period - j;
    }
    j as usize
}

/// Short-time Fourier transform.
///
/// Frames are centered: the signal is reflection-padded by `nfft/2` on each
/// side and frame `t` covers the padded range starting at `t * hop`, giving
/// `floor(len / hop) + 1` frames. An empty input yields an empty grid.
pub fn stft(wave: &[f32], nfft: usize, hop: usize, sample_rate: u32) -> Result<ComplexGrid> {
    if nfft < 8 || !nfft.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "nfft must be a power of two >= 8, got {nfft}"
        )));
    }
    if hop == 0 || hop > nfft {
        return Err(Error::InvalidArgument(format!("hop must be in 1..={nfft}, got {hop}")));
    }
    let bins = nfft / 2 + 1;
    let hz_per_bin = sample_rate as f64 / nfft as f64;
    let frame_hop_s = hop as f64 / sample_rate as f64;
    if wave.is_empty() {
        return Ok(ComplexGrid { values: Vec::new(), bins, frames: 0, hz_per_bin, frame_hop_s });
    }

    let frames = wave.len() / hop + 1;
    let window = hann_window(nfft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let pad = (nfft / 2) as i64;

    let mut values = vec![Complex::new(0.0, 0.0); bins * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    for t in 0..frames {
        let start = t as i64 * hop as i64 - pad;
        for (i, w) in window.iter().enumerate() {
            let idx = reflect(start + i as i64, wave.len());
            buf[i] = Complex::new(wave[idx] as f64 * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, v) in buf.iter().take(bins).enumerate() {
            values[k * frames + t] = *v;
        }
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
    }
    Ok(ComplexGrid { values, bins, frames, hz_per_bin, frame_hop_s })
}

/// Power spectrogram: `|STFT|²`.
pub fn power_spectrogram(
    wave: &[f32],
    nfft: usize,
    hop: usize,
    sample_rate: u32,
) -> Result<TimeFreqGrid> {
    let spec = stft(wave, nfft, hop, sample_rate)?;
    let values = spec.values.iter().map(|c| c.norm_sqr() as f32).collect();
    Ok(TimeFreqGrid {
        values,
        bins: spec.bins,
        frames: spec.frames,
        bin_hz: BinAxis::Linear { hz_per_bin: spec.hz_per_bin },
        frame_hop_s: spec.frame_hop_s,
        scale: GridScale::Power,
    })
}

/// Converts a power grid to decibels: `10·log10(max(v, eps))`, optionally
/// floored at `max - top_db`.
pub fn amplitude_to_db(grid: &TimeFreqGrid, eps: f64, top_db: Option<f64>) -> Result<TimeFreqGrid> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let mut values: Vec<f32> = grid
        .values
        .iter()
        .map(|&v| (10.0 * (v as f64).max(eps).log10()) as f32)
        .collect();
    if let Some(top_db) = top_db {
        let max = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let floor = max - top_db as f32;
        for v in &mut values {
            *v = v.max(floor);
        }
    }
    Ok(TimeFreqGrid { values, scale: GridScale::Db, ..grid.clone() })
}

/// The mel curve: `mel(f) = 2595·log10(1 + f/700)`.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, apex 1 (no area normalization).
///
/// Returns a row-major `[n_mels × (nfft/2 + 1)]` matrix whose rows are
/// triangles with centers equally spaced on the mel curve between `fmin`
/// and `fmax`, evaluated at the linear bin frequencies.
pub fn mel_filterbank(
    sample_rate: u32,
    nfft: usize,
    n_mels: usize,
    fmin: f64,
    fmax: f64,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if n_mels < 1 {
        return Err(Error::InvalidArgument("n_mels must be >= 1".into()));
    }
    if !(0.0 <= fmin && fmin < fmax && fmax <= nyquist) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= fmin < fmax <= {nyquist}, got fmin {fmin}, fmax {fmax}"
        )));
    }
    let bins = nfft / 2 + 1;
    let mel_lo = hz_to_mel(fmin);
    let mel_hi = hz_to_mel(fmax);
    let hz_points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let hz_per_bin = sample_rate as f64 / nfft as f64;
    let mut weights = vec![0.0f32; n_mels * bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (hz_points[m], hz_points[m + 1], hz_points[m + 2]);
        for k in 0..bins {
            let f = k as f64 * hz_per_bin;
            let rise = (f - lo) / (center - lo);
            let fall = (hi - f) / (hi - center);
            let w = rise.min(fall).max(0.0);
            weights[m * bins + k] = w as f32;
        }
    }
    Ok(MelFilterbank { weights, n_mels, bins, centers_hz: hz_points[1..=n_mels].to_vec() })
}

/// A mel projection matrix plus its band centers.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Row-major `[n_mels × bins]`.
    pub weights: Vec<f32>,
    pub n_mels: usize,
    pub bins: usize,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f32] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    /// Projects a power grid onto the mel bands.
    pub fn apply(&self, grid: &TimeFreqGrid) -> Result<TimeFreqGrid> {
        if grid.bins != self.bins {
            return Err(Error::Shape(format!(
                "filterbank expects {} bins, grid has {}",
                self.bins, grid.bins
            )));
        }
        let frames = grid.frames;
        let mut values = vec![0.0f32; self.n_mels * frames];
        for m in 0..self.n_mels {
            let row = self.row(m);
            for (k, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let src = grid.row(k);
                let dst = &mut values[m * frames..(m + 1) * frames];
                for t in 0..frames {
                    dst[t] += w * src[t];
                }
            }
        }
        Ok(TimeFreqGrid {
            values,
            bins: self.n_mels,
            frames,
            bin_hz: BinAxis::MelCenters(self.centers_hz.clone()),
            frame_hop_s: grid.frame_hop_s,
            scale: GridScale::Mel,
        })
    }
}

// ---------------------------------------------------------------------------
// PCEN
// ---------------------------------------------------------------------------

/// Per-channel energy normalization parameters.
///
/// `PCEN = (E / (eps + M)^alpha + delta)^r − delta^r`, where `M` is the
/// per-row first-order IIR smoothing `M[t] = (1−s)·M[t−1] + s·E[t]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PcenParams {
    /// Gain strength exponent.
    pub alpha: f64,
    /// Bias.
    pub delta: f64,
    /// Root exponent.
    pub root: f64,
    /// IIR smoothing coefficient in (0, 1].
    pub smoothing: f64,
    /// Stabilizer added to the smoothed energy.
    pub eps: f64,
    /// Whether alpha, delta, and root receive gradients when used as a
    /// model frontend.
    pub trainable: bool,
}

impl Default for PcenParams {
    fn default() -> Self {
        PcenParams { alpha: 0.98, delta: 2.0, root: 0.5, smoothing: 0.025, eps: 1e-6, trainable: true }
    }
}

impl PcenParams {
    pub fn validate(&self) -> Result<()> {
        // eps = 0 is allowed: the pure AGC form divides by the smoothed
        // energy alone.
        if self.eps.is_nan() || self.eps < 0.0 {
            return Err(Error::InvalidArgument("pcen eps must be >= 0".into()));
        }
        if !(0.0 < self.smoothing && self.smoothing <= 1.0) {
            return Err(Error::InvalidArgument("pcen smoothing must be in (0, 1]".into()));
        }
        if self.root <= 0.0 {
            return Err(Error::InvalidArgument("pcen root must be > 0".into()));
        }
        Ok(())
    }
}

/// Initial state for the PCEN smoother.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PcenInit {
    /// `M[0] = E[0]`.
    FirstFrame,
    /// `M[-1] = 0`, so `M[0] = s·E[0]`.
    Zeros,
}

/// Per-row IIR smoothing of a non-negative grid.
pub fn pcen_smooth(values: &[f32], bins: usize, frames: usize, s: f64, init: PcenInit) -> Vec<f64> {
    let mut out = vec![0.0f64; values.len()];
    for b in 0..bins {
        let row = &values[b * frames..(b + 1) * frames];
        let mut m = match init {
            PcenInit::FirstFrame => row.first().copied().unwrap_or(0.0) as f64,
            PcenInit::Zeros => 0.0,
        };
        for (t, &e) in row.iter().enumerate() {
            if !(init == PcenInit::FirstFrame && t == 0) {
                m = (1.0 - s) * m + s * e as f64;
            }
            out[b * frames + t] = m;
        }
    }
    out
}

/// Applies PCEN to a non-negative (power or mel) grid.
pub fn pcen(grid: &TimeFreqGrid, params: &PcenParams, init: PcenInit) -> Result<TimeFreqGrid> {
    params.validate()?;
    if grid.values.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("pcen input must be non-negative".into()));
    }
    let smoothed = pcen_smooth(&grid.values, grid.bins, grid.frames, params.smoothing, init);
    let delta_r = params.delta.powf(params.root);
    let values = grid
        .values
        .iter()
        .zip(&smoothed)
        .map(|(&e, &m)| {
            let gain = e as f64 / (params.eps + m).powf(params.alpha);
            ((gain + params.delta).powf(params.root) - delta_r) as f32
        })
        .collect();
    Ok(TimeFreqGrid { values, scale: GridScale::Pcen, ..grid.clone() })
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

/// Scales to `[-1, 1]` by the peak absolute value; inputs with a peak
/// below 1e-12 pass through unchanged.
pub fn normalize_peak(x: &[f32]) -> Vec<f32> {
    let peak = x.iter().fold(0.0f32, |acc, &v| acc.max(v.abs()));
    if peak < 1e-12 {
        return x.to_vec();
    }
    x.iter().map(|&v| v / peak).collect()
}

/// Zero-mean, unit-variance scaling with population statistics; inputs with
/// a standard deviation below 1e-12 are only mean-centered.
pub fn normalize_unit(x: &[f32]) -> Vec<f32> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return x.iter().map(|&v| (v as f64 - mean) as f32).collect();
    }
    x.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
}

/// Per-row local z-scoring over a centered, edge-clamped window of
/// `win_frames` frames: `(v − μ)/(σ + 1e-6)` with population σ.
pub fn normalize_sliding(grid: &TimeFreqGrid, win_frames: usize) -> Result<TimeFreqGrid> {
    if win_frames == 0 || win_frames % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "win_frames must be odd and >= 1, got {win_frames}"
        )));
    }
    let half = (win_frames / 2) as i64;
    let frames = grid.frames;
    let mut values = vec![0.0f32; grid.values.len()];
    for b in 0..grid.bins {
        let row = grid.row(b);
        for t in 0..frames {
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for off in -half..=half {
                let idx = (t as i64 + off).clamp(0, frames as i64 - 1) as usize;
                let v = row[idx] as f64;
                sum += v;
                sum_sq += v * v;
            }
            let n = win_frames as f64;
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0);
            values[b * frames + t] = ((row[t] as f64 - mean) / (var.sqrt() + 1e-6)) as f32;
        }
    }
    Ok(TimeFreqGrid { values, scale: GridScale::Normalized, ..grid.clone() })
}

// ---------------------------------------------------------------------------
// Preprocessing pipeline
// ---------------------------------------------------------------------------

/// Waveform-level normalization applied before the spectrogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveformNorm {
    None,
    Peak,
    Unit,
}

/// Grid-level normalization applied after the spectral transforms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridNorm {
    None,
    Sliding { win_frames: usize },
}

/// Mel projection settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MelSettings {
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

/// Decibel scaling settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DbSettings {
    pub eps: f64,
    pub top_db: Option<f64>,
}

/// The full waveform → grid preprocessing recipe.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PreprocessConfig {
    pub waveform_norm: WaveformNorm,
    pub nfft: usize,
    pub hop: usize,
    pub mel: Option<MelSettings>,
    pub db: Option<DbSettings>,
    pub grid_norm: GridNorm,
}

impl PreprocessConfig {
    /// Output grid dimensions for a window of `samples` samples.
    pub fn output_dims(&self, samples: usize) -> (usize, usize) {
        let bins = match self.mel {
            Some(mel) => mel.n_mels,
            None => self.nfft / 2 + 1,
        };
        (bins, samples / self.hop + 1)
    }
}

/// Runs the preprocessing pipeline on one window of samples.
pub fn preprocess_segment(
    wave: &[f32],
    sample_rate: u32,
    cfg: &PreprocessConfig,
) -> Result<TimeFreqGrid> {
    let wave = match cfg.waveform_norm {
        WaveformNorm::None => wave.to_vec(),
        WaveformNorm::Peak => normalize_peak(wave),
        WaveformNorm::Unit => normalize_unit(wave),
    };
    let mut grid = power_spectrogram(&wave, cfg.nfft, cfg.hop, sample_rate)?;
    if let Some(mel) = cfg.mel {
        let fb = mel_filterbank(sample_rate, cfg.nfft, mel.n_mels, mel.fmin, mel.fmax)?;
        grid = fb.apply(&grid)?;
    }
    if let Some(db) = cfg.db {
        grid = amplitude_to_db(&grid, db.eps, db.top_db)?;
    }
    match cfg.grid_norm {
        GridNorm::None => Ok(grid),
        GridNorm::Sliding { win_frames } => normalize_sliding(&grid, win_frames),
    }
}
