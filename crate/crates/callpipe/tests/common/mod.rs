//! Shared fixtures: a synthetic detection corpus of chirps in pink noise.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use callpipe::audio::{write_wav, AudioClip, WavEncoding};

pub const CORPUS_SR: u32 = 8000;

/// Paul Kellet's economy pinking filter over white noise.
pub fn pink_noise(n: usize, rng: &mut ChaCha8Rng, scale: f32) -> Vec<f32> {
    let (mut b0, mut b1, mut b2) = (0.0f32, 0.0f32, 0.0f32);
    (0..n)
        .map(|_| {
            let white: f32 = rng.gen_range(-1.0..1.0);
            b0 = 0.99765 * b0 + white * 0.0990460;
            b1 = 0.96300 * b1 + white * 0.2965164;
            b2 = 0.57000 * b2 + white * 1.0526913;
            (b0 + b1 + b2 + white * 0.1848) * scale
        })
        .collect()
}

/// A linear chirp sweeping `f0 → f1` Hz with the requested amplitude.
pub fn chirp(f0: f64, f1: f64, seconds: f64, sr: u32, amplitude: f64) -> Vec<f32> {
    let n = (seconds * sr as f64).round() as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr as f64;
            let phase = 2.0 * std::f64::consts::PI * (f0 * t + (f1 - f0) / (2.0 * seconds) * t * t);
            (amplitude * phase.sin()) as f32
        })
        .collect()
}

fn variance(x: &[f32]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
}

/// Writes `n_clips` two-second 8 kHz clips under `<dir>/audio` plus
/// `<dir>/annotations.csv`.
///
/// Each clip is pink noise with a 500→1500 Hz chirp over [1.05 s, 1.95 s]
/// at an SNR drawn from [−5, +10] dB, annotated as `call`. With 1 s
/// windows this tiles into one background window and one call window per
/// file, so any file-level split contains both classes.
pub fn generate_corpus(dir: &Path, n_clips: usize, seed: u64) -> (PathBuf, PathBuf) {
    let audio_dir = dir.join("audio");
    std::fs::create_dir_all(&audio_dir).unwrap();
    let annotations_path = dir.join("annotations.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = std::fs::File::create(&annotations_path).unwrap();
    writeln!(csv, "filename,channel,begin_time,end_time,low_freq,high_freq,label").unwrap();

    let n = 2 * CORPUS_SR as usize;
    for i in 0..n_clips {
        let name = format!("clip{i:03}.wav");
        let mut samples = pink_noise(n, &mut rng, 0.05);
        let snr_db = rng.gen_range(-5.0f64..10.0);
        let noise_var = variance(&samples);
        let amplitude = (2.0 * noise_var * 10f64.powf(snr_db / 10.0)).sqrt();
        let call = chirp(500.0, 1500.0, 0.9, CORPUS_SR, amplitude);
        let offset = (1.05 * CORPUS_SR as f64) as usize;
        for (k, &v) in call.iter().enumerate() {
            samples[offset + k] = (samples[offset + k] + v).clamp(-1.0, 1.0);
        }
        writeln!(csv, "{name},1,1.05,1.95,500,1500,call").unwrap();
        let clip = AudioClip::mono(samples, CORPUS_SR, &name);
        write_wav(&audio_dir.join(&name), &clip, WavEncoding::PcmI16).unwrap();
    }
    (audio_dir, annotations_path)
}

/// The repository's shipped configuration root.
pub fn conf_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../conf")
}
