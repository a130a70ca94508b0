//! WAV decoding, sample-rate conversion, and channel mixdown.
//!
//! Decoding accepts RIFF/WAVE containers with 16/24/32-bit integer PCM or
//! 32-bit float encoding. Integer samples are scaled by `1 / 2^(bits-1)`
//! into `[-1, 1]`. Resampling uses a Kaiser-windowed sinc interpolator;
//! its output is intentionally not clamped — downstream normalization owns
//! the final range.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// A decoded waveform: per-channel sample vectors plus the sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    /// `samples[channel][frame]`, unit-scale floats.
    pub samples: Vec<Vec<f32>>,
    /// Sample rate in Hz.
    pub sample_rate: u32,
    /// Where the clip came from, for error messages and reports.
    pub source_path: String,
}

impl AudioClip {
    pub fn new(samples: Vec<Vec<f32>>, sample_rate: u32, source_path: impl Into<String>) -> Self {
        AudioClip { samples, sample_rate, source_path: source_path.into() }
    }

    /// Single-channel constructor.
    pub fn mono(samples: Vec<f32>, sample_rate: u32, source_path: impl Into<String>) -> Self {
        AudioClip::new(vec![samples], sample_rate, source_path)
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn frames(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }
}

/// Channel-reduction policy for [`mixdown`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixdownPolicy {
    /// Keep channel `k` (0-based) verbatim.
    SelectChannel(usize),
    /// Arithmetic mean across channels.
    Average,
}

// ---------------------------------------------------------------------------
// WAV decoding
// ---------------------------------------------------------------------------

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Decodes a RIFF/WAVE file into an [`AudioClip`].
pub fn decode_wav(path: &Path) -> Result<AudioClip> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_wav_bytes(&bytes, &path.display().to_string())
}

fn decode_err(path: &str, reason: impl Into<String>) -> Error {
    Error::Decode { path: path.into(), reason: reason.into() }
}

fn decode_wav_bytes(bytes: &[u8], path: &str) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(decode_err(path, "not a RIFF/WAVE file"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        match id {
            b"fmt " => {
                let body = bytes
                    .get(body_start..body_start + size.max(16).min(bytes.len() - body_start))
                    .filter(|b| b.len() >= 16)
                    .ok_or_else(|| decode_err(path, "truncated fmt chunk"))?;
                let mut format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format == FORMAT_EXTENSIBLE {
                    // SubFormat GUID starts at offset 24; its first two bytes
                    // carry the effective format code.
                    if body.len() >= 26 {
                        format = u16::from_le_bytes(body[24..26].try_into().unwrap());
                    } else {
                        return Err(decode_err(path, "extensible fmt chunk too short"));
                    }
                }
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => {
                let body = bytes
                    .get(body_start..body_start + size)
                    .ok_or_else(|| decode_err(path, "truncated data chunk"))?;
                data = Some(body);
            }
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_start + size + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| decode_err(path, "missing fmt chunk"))?;
    let data = data.ok_or_else(|| decode_err(path, "missing data chunk"))?;
    if channels == 0 {
        return Err(decode_err(path, "zero channels"));
    }
    if rate == 0 {
        return Err(decode_err(path, "zero sample rate"));
    }

    let decode_frames = |bytes_per_sample: usize,
                         read: &dyn Fn(&[u8]) -> f32|
     -> Result<Vec<Vec<f32>>> {
        let frame_bytes = bytes_per_sample * channels as usize;
        if data.len() % frame_bytes != 0 {
            return Err(decode_err(path, "truncated data chunk"));
        }
        let frames = data.len() / frame_bytes;
        let mut out = vec![Vec::with_capacity(frames); channels as usize];
        for f in 0..frames {
            for (c, channel) in out.iter_mut().enumerate() {
                let start = f * frame_bytes + c * bytes_per_sample;
                channel.push(read(&data[start..start + bytes_per_sample]));
            }
        }
        Ok(out)
    };

    let samples = match (format, bits) {
        (FORMAT_PCM, 16) => decode_frames(2, &|b| {
            i16::from_le_bytes(b.try_into().unwrap()) as f32 / 32768.0
        })?,
        (FORMAT_PCM, 24) => decode_frames(3, &|b| {
            // Sign-extend the 24-bit value into an i32, scale by 1 / 2^23.
            let v = ((b[0] as i32) | ((b[1] as i32) << 8) | ((b[2] as i32) << 16)) << 8 >> 8;
            v as f32 / 8_388_608.0
        })?,
        (FORMAT_PCM, 32) => decode_frames(4, &|b| {
            i32::from_le_bytes(b.try_into().unwrap()) as f64 as f32 / 2_147_483_648.0
        })?,
        (FORMAT_IEEE_FLOAT, 32) => {
            decode_frames(4, &|b| f32::from_le_bytes(b.try_into().unwrap()))?
        }
        (tag, bits) => {
            return Err(decode_err(
                path,
                format!("unsupported encoding: format tag {tag}, {bits}-bit"),
            ))
        }
    };

    for channel in &samples {
        if channel.iter().any(|v| !v.is_finite()) {
            return Err(decode_err(path, "non-finite sample values"));
        }
    }

    Ok(AudioClip::new(samples, rate, path))
}

// ---------------------------------------------------------------------------
// WAV encoding (fixtures, exports)
// ---------------------------------------------------------------------------

/// Output sample encodings for [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    PcmI16,
    Float32,
}

/// Writes a clip as a RIFF/WAVE file.
pub fn write_wav(path: &Path, clip: &AudioClip, encoding: WavEncoding) -> Result<()> {
    let channels = clip.channels();
    let frames = clip.frames();
    if clip.samples.iter().any(|c| c.len() != frames) {
        return Err(Error::InvalidArgument("channels differ in length".into()));
    }
    let (format, bits): (u16, u16) = match encoding {
        WavEncoding::PcmI16 => (FORMAT_PCM, 16),
        WavEncoding::Float32 => (FORMAT_IEEE_FLOAT, 32),
    };
    let bytes_per_sample = (bits / 8) as usize;
    let data_len = frames * channels * bytes_per_sample;

    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&(channels as u16).to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    let byte_rate = clip.sample_rate * (channels * bytes_per_sample) as u32;
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&((channels * bytes_per_sample) as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for f in 0..frames {
        for channel in &clip.samples {
            match encoding {
                WavEncoding::PcmI16 => {
                    let v = (channel[f].clamp(-1.0, 1.0) * 32767.0).round() as i16;
                    out.extend_from_slice(&v.to_le_bytes());
                }
                WavEncoding::Float32 => out.extend_from_slice(&channel[f].to_le_bytes()),
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Zero crossings per side of the sinc kernel.
const SINC_ZERO_CROSSINGS: usize = 64;
/// Kaiser window shape parameter.
const KAISER_BETA: f64 = 8.6;
/// Kernel table resolution between adjacent zero crossings.
const TABLE_OVERSAMPLE: usize = 512;

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut sum = 1.0;
    let mut term = 1.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-18 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc kernel sampled on `[0, SINC_ZERO_CROSSINGS]`.
fn build_kernel_table() -> Vec<f64> {
    let n = SINC_ZERO_CROSSINGS * TABLE_OVERSAMPLE + 1;
    let i0_beta = bessel_i0(KAISER_BETA);
    (0..n)
        .map(|i| {
            let x = i as f64 / TABLE_OVERSAMPLE as f64;
            let sinc = if x == 0.0 {
                1.0
            } else {
                (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
            };
            let t = x / SINC_ZERO_CROSSINGS as f64;
            let window = bessel_i0(KAISER_BETA * (1.0 - t * t).max(0.0).sqrt()) / i0_beta;
            sinc * window
        })
        .collect()
}

fn kernel_lookup(table: &[f64], u: f64) -> f64 {
    let idx = u * TABLE_OVERSAMPLE as f64;
    let i = idx as usize;
    if i + 1 >= table.len() {
        return 0.0;
    }
    let frac = idx - i as f64;
    table[i] + (table[i + 1] - table[i]) * frac
}

/// Band-limited sample-rate conversion.
///
/// The output frame count is `round(frames * target / source)`. Each output
/// sample is a kernel-weighted sum of nearby input samples, normalized by
/// the in-range kernel mass, so a constant signal stays constant. Resampling
/// to the source rate returns the clip unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target sample rate must be positive".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src_rate = clip.sample_rate as f64;
    let ratio = target_rate as f64 / src_rate;
    let out_frames = (clip.frames() as f64 * ratio).round() as usize;

    // When downsampling, the cutoff drops to the output Nyquist and the
    // kernel stretches accordingly.
    let cutoff = ratio.min(1.0);
    let half_width = SINC_ZERO_CROSSINGS as f64 / cutoff;
    let table = build_kernel_table();

    let mut out_channels = Vec::with_capacity(clip.channels());
    for channel in &clip.samples {
        let n = channel.len() as i64;
        let mut out = Vec::with_capacity(out_frames);
        for j in 0..out_frames {
            let center = j as f64 / ratio;
            let k_min = (center - half_width).ceil() as i64;
            let k_max = (center + half_width).floor() as i64;
            let mut acc = 0.0f64;
            let mut weight_sum = 0.0f64;
            for k in k_min.max(0)..=k_max.min(n - 1) {
                let u = ((center - k as f64) * cutoff).abs();
                let w = kernel_lookup(&table, u);
                acc += channel[k as usize] as f64 * w;
                weight_sum += w;
            }
            out.push(if weight_sum.abs() > 0.0 { (acc / weight_sum) as f32 } else { 0.0 });
        }
        out_channels.push(out);
    }
    Ok(AudioClip::new(out_channels, target_rate, clip.source_path.clone()))
}

// ---------------------------------------------------------------------------
// Mixdown
// ---------------------------------------------------------------------------

/// Reduces a clip to one channel.
pub fn mixdown(clip: &AudioClip, policy: MixdownPolicy) -> Result<AudioClip> {
    if clip.channels() == 1 {
        return Ok(clip.clone());
    }
    let frames = clip.frames();
    let mono = match policy {
        MixdownPolicy::SelectChannel(k) => {
            let channel = clip.samples.get(k).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "channel {k} out of range (clip has {})",
                    clip.channels()
                ))
            })?;
            channel.clone()
        }
        MixdownPolicy::Average => {
            let scale = 1.0 / clip.channels() as f32;
            (0..frames)
                .map(|f| clip.samples.iter().map(|c| c[f]).sum::<f32>() * scale)
                .collect()
        }
    };
    Ok(AudioClip::mono(mono, clip.sample_rate, clip.source_path.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;
    use tempfile::TempDir;

    fn wav_bytes(format: u16, bits: u16, channels: u16, rate: u32, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&((36 + payload.len()) as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        let bps = (bits / 8) as u32;
        out.extend_from_slice(&(rate * bps * channels as u32).to_le_bytes());
        out.extend_from_slice(&((bps as u16) * channels).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn pcm16_scaling() {
        let mut payload = Vec::new();
        for v in [0i16, 16384, -32768] {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let clip = decode_wav_bytes(&wav_bytes(1, 16, 1, 8000, &payload), "t.wav").unwrap();
        assert_eq!(clip.samples[0], vec![0.0, 0.5, -1.0]);
    }

    #[test]
    fn pcm24_scaling() {
        // min (0x800000), half (0x400000), +1 LSB
        let payload = [0x00, 0x00, 0x80, 0x00, 0x00, 0x40, 0x01, 0x00, 0x00];
        let clip = decode_wav_bytes(&wav_bytes(1, 24, 1, 8000, &payload), "t.wav").unwrap();
        assert_eq!(clip.samples[0][0], -1.0);
        assert_eq!(clip.samples[0][1], 0.5);
        assert_eq!(clip.samples[0][2], 1.0 / 8_388_608.0);
    }

    #[test]
    fn stereo_441k_fixture() {
        let mut payload = Vec::new();
        for f in 0..4i16 {
            payload.extend_from_slice(&(f * 100).to_le_bytes());
            payload.extend_from_slice(&(-f * 100).to_le_bytes());
        }
        let clip = decode_wav_bytes(&wav_bytes(1, 16, 2, 44100, &payload), "t.wav").unwrap();
        assert_eq!(clip.sample_rate, 44100);
        assert_eq!(clip.channels(), 2);
        assert_eq!(clip.frames(), 4);
    }

    #[test]
    fn zero_frame_file() {
        let clip = decode_wav_bytes(&wav_bytes(1, 16, 1, 8000, &[]), "t.wav").unwrap();
        assert_eq!(clip.frames(), 0);
    }

    #[test]
    fn unsupported_encoding_names_tag() {
        let err = decode_wav_bytes(&wav_bytes(6, 8, 1, 8000, &[0]), "t.wav")
            .unwrap_err()
            .to_string();
        assert!(err.contains("format tag 6"), "{err}");
    }

    #[test]
    fn truncated_data_chunk_errors() {
        let mut bytes = wav_bytes(1, 16, 1, 8000, &[0, 0, 0, 0]);
        bytes.truncate(bytes.len() - 2);
        let err = decode_wav_bytes(&bytes, "t.wav").unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn float32_round_trips_through_file() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("x.wav");
        let clip = AudioClip::mono(vec![0.25, -0.5, 0.75, 1.0], 8000, "x");
        write_wav(&path, &clip, WavEncoding::Float32).unwrap();
        let back = decode_wav(&path).unwrap();
        assert_eq!(back.samples[0], clip.samples[0]);
        assert_eq!(back.sample_rate, 8000);
    }

    #[test]
    fn resample_identity_at_same_rate() {
        let clip = AudioClip::mono(vec![0.1, -0.2, 0.3], 8000, "x");
        let out = resample(&clip, 8000).unwrap();
        assert_eq!(out.samples, clip.samples);
    }

    #[test]
    fn resample_frame_count() {
        let clip = AudioClip::mono(vec![0.0; 44100], 44100, "x");
        let out = resample(&clip, 20000).unwrap();
        assert_eq!(out.frames(), 20000);
        let odd = AudioClip::mono(vec![0.0; 12345], 44100, "x");
        let out = resample(&odd, 20000).unwrap();
        assert_eq!(out.frames(), (12345f64 * 20000.0 / 44100.0).round() as usize);
    }

    #[test]
    fn resample_preserves_dc() {
        let clip = AudioClip::mono(vec![0.7; 4000], 8000, "x");
        let out = resample(&clip, 5000).unwrap();
        for &v in &out.samples[0] {
            assert!((v - 0.7).abs() < 1e-6, "{v}");
        }
    }

    fn fft_peak_hz(samples: &[f32], rate: u32) -> f64 {
        let n = samples.len();
        let mut buf: Vec<Complex<f64>> =
            samples.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let peak = (1..n / 2)
            .max_by(|&a, &b| buf[a].norm().partial_cmp(&buf[b].norm()).unwrap())
            .unwrap();
        peak as f64 * rate as f64 / n as f64
    }

    fn tone(freq: f64, rate: u32, seconds: f64) -> Vec<f32> {
        let n = (rate as f64 * seconds) as usize;
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).cos() as f32)
            .collect()
    }

    fn interior_rms(samples: &[f32], skip: usize) -> f64 {
        let body = &samples[skip..samples.len() - skip];
        (body.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / body.len() as f64).sqrt()
    }

    #[test]
    fn resampled_tone_keeps_frequency_and_level() {
        let clip = AudioClip::mono(tone(440.0, 44100, 1.0), 44100, "x");
        let out = resample(&clip, 22050).unwrap();
        let bin_hz = 22050.0 / out.frames() as f64;
        assert!((fft_peak_hz(&out.samples[0], 22050) - 440.0).abs() <= bin_hz);
        let rms_in = interior_rms(&clip.samples[0], 200);
        let rms_out = interior_rms(&out.samples[0], 200);
        assert!((rms_out - rms_in).abs() / rms_in < 0.01, "{rms_in} vs {rms_out}");
    }

    #[test]
    fn up_down_cascade_preserves_low_tone() {
        let rate = 8000;
        let clip = AudioClip::mono(tone(500.0, rate, 1.0), rate, "x"); // < rate/4
        let up = resample(&clip, 2 * rate).unwrap();
        let back = resample(&up, rate).unwrap();
        let bin_hz = rate as f64 / back.frames() as f64;
        assert!((fft_peak_hz(&back.samples[0], rate) - 500.0).abs() <= bin_hz);
        let rms_in = interior_rms(&clip.samples[0], 200);
        let rms_out = interior_rms(&back.samples[0], 200);
        assert!((rms_out - rms_in).abs() / rms_in < 0.02);
    }

    #[test]
    fn mixdown_policies() {
        let mono = AudioClip::mono(vec![0.5, 0.5], 8000, "m");
        assert_eq!(mixdown(&mono, MixdownPolicy::Average).unwrap(), mono);

        let stereo = AudioClip::new(vec![vec![1.0, 1.0], vec![0.0, 0.0]], 8000, "s");
        let avg = mixdown(&stereo, MixdownPolicy::Average).unwrap();
        assert_eq!(avg.samples[0], vec![0.5, 0.5]);

        let second = mixdown(&stereo, MixdownPolicy::SelectChannel(1)).unwrap();
        assert_eq!(second.samples[0], vec![0.0, 0.0]);

        assert!(mixdown(&stereo, MixdownPolicy::SelectChannel(2)).is_err());
    }
}
