//! Cross-module behavior: the training loop's early stopping, inference
//! tiling, and agreement between the evaluation paths.

mod common;

use std::path::PathBuf;
use std::sync::OnceLock;

use rand_chacha::rand_core::SeedableRng;
use tempfile::TempDir;

use callpipe::annotations::{load_annotations, segment_dataset, DatasetSpec};
use callpipe::audio::AudioClip;
use callpipe::config::load_config;
use callpipe::inference::{evaluate_recordings, infer_file};
use callpipe::nn::forward_eval;
use callpipe::trainer::{
    evaluate_segments, load_checkpoint, parse_trainer_config, save_checkpoint, train, Checkpoint,
    TrainerConfig,
};

fn small_corpus() -> &'static (TempDir, PathBuf, PathBuf) {
    static CORPUS: OnceLock<(TempDir, PathBuf, PathBuf)> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let (audio, annotations) = common::generate_corpus(dir.path(), 16, 7);
        (dir, audio, annotations)
    })
}

fn small_config(extra: &[&str]) -> TrainerConfig {
    let (_, audio, annotations) = small_corpus();
    let mut overrides = vec![
        format!("data.audio_dir={}", audio.display()),
        format!("data.annotations={}", annotations.display()),
        "data.batch_size=8".to_string(),
    ];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    let resolved = load_config(&common::conf_dir(), "default", &overrides).unwrap();
    parse_trainer_config(&resolved).unwrap()
}

/// A briefly trained model on the small corpus, shared across tests.
fn trained_checkpoint() -> &'static Checkpoint {
    static TRAINED: OnceLock<Checkpoint> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let cfg = small_config(&["optim.epochs=4"]);
        let (ckpt, _) = train(cfg, None).unwrap();
        ckpt
    })
}

#[test]
fn frozen_model_stops_after_patience_epochs() {
    // With lr = 0 nothing improves after epoch 1; patience 10 stops the
    // run at epoch 11.
    let cfg = small_config(&["optim.lr=0.0", "optim.epochs=30"]);
    let (_, record) = train(cfg, None).unwrap();
    assert_eq!(record.stopped_epoch, 11);
    assert_eq!(record.best_epoch, 1);
}

#[test]
fn inference_tiles_whole_recordings() {
    let ckpt = trained_checkpoint();
    // A 10-second call-free clip (background noise only) at the training
    // rate: exactly 10 windows, begins 0..9.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4242);
    let clip = AudioClip::mono(common::pink_noise(80_000, &mut rng, 0.05), 8000, "quiet.wav");
    let rows = infer_file(ckpt, &clip).unwrap();
    assert_eq!(rows.len(), 10);
    for (w, row) in rows.iter().enumerate() {
        assert!((row.begin_s - w as f64).abs() < 1e-9);
        let total: f64 = row.probabilities.iter().sum();
        assert!((total - 1.0).abs() <= 1e-6);
    }
    // A call-free clip is background in at least 9 of the 10 windows.
    let background = rows.iter().filter(|r| r.probabilities[0] > 0.5).count();
    assert!(background >= 9, "only {background} of 10 windows called background");

    // The trained checkpoint round-trips bit-identically.
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("trained.ckpt");
    save_checkpoint(ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let batch = callpipe::nn::Tensor::zeros(&[1, 1, 32, 63]);
    let a = forward_eval(&ckpt.model, &batch).unwrap();
    let b = forward_eval(&back.model, &batch).unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn recording_evaluation_matches_trainer_evaluation() {
    let ckpt = trained_checkpoint();
    let (_, audio, annotations) = small_corpus();
    let records = load_annotations(annotations).unwrap();

    // Clips as the inference CLI would load them, keyed by bare filename.
    let mut clips = Vec::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(audio)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    paths.sort();
    for path in &paths {
        let mut clip = callpipe::audio::decode_wav(path).unwrap();
        clip.source_path = path.file_name().unwrap().to_string_lossy().into_owned();
        clips.push(clip);
    }

    let eval = evaluate_recordings(ckpt, &clips, &records, 0.5).unwrap();
    assert_eq!(eval.skipped_files, 0);

    // The same segment set through the trainer's evaluation path.
    let snapshot = &ckpt.preprocess;
    let prepared: std::collections::BTreeMap<String, AudioClip> = clips
        .iter()
        .map(|c| (c.source_path.clone(), c.clone()))
        .collect();
    let durations: std::collections::BTreeMap<String, f64> =
        prepared.iter().map(|(n, c)| (n.clone(), c.duration_s())).collect();
    let spec = DatasetSpec {
        segment_len_s: snapshot.segment_len_s,
        mode: snapshot.dataset_mode,
        overlap_threshold: snapshot.overlap_threshold,
        classes: ckpt.class_names.clone(),
        seed: 0,
    };
    let segments = segment_dataset(&records, &durations, &spec).unwrap();
    let direct = evaluate_segments(
        &ckpt.model,
        &prepared,
        &segments,
        &snapshot.pipeline,
        snapshot.segment_samples(),
        64,
        0.5,
    )
    .unwrap();

    assert!((eval.metrics.auc - direct.metrics.auc).abs() < 1e-9);
    assert!((eval.metrics.f1 - direct.metrics.f1).abs() < 1e-9);
    assert!((eval.metrics.accuracy - direct.metrics.accuracy).abs() < 1e-9);
    assert_eq!(eval.windows, segments.len());
}

#[test]
fn files_without_annotations_are_skipped_with_a_count() {
    let ckpt = trained_checkpoint();
    let (_, audio, annotations) = small_corpus();
    let records = load_annotations(annotations).unwrap();

    let path = std::fs::read_dir(audio).unwrap().next().unwrap().unwrap().path();
    let mut annotated = callpipe::audio::decode_wav(&path).unwrap();
    annotated.source_path = path.file_name().unwrap().to_string_lossy().into_owned();
    let stray = AudioClip::mono(vec![0.0; 16_000], 8000, "unannotated.wav");

    let eval = evaluate_recordings(ckpt, &[annotated, stray.clone()], &records, 0.5).unwrap();
    assert_eq!(eval.skipped_files, 1);

    // No overlap at all is an error.
    assert!(evaluate_recordings(ckpt, &[stray], &records, 0.5).is_err());
}
