//! Training orchestration.
//!
//! One epoch is: assemble batches from the balanced sampler → augment →
//! preprocess → forward → cross-entropy loss → backward → optimizer step.
//! Each epoch ends with validation on the untouched split (eval mode, file
//! order, no balancing), the exponential scheduler step, and one appended
//! line in the run's `log.jsonl`. Training tracks the best validation AUC
//! and stops early after `patience` epochs without improvement, returning
//! the best-epoch checkpoint.
//!
//! Binary metrics treat class 0 (background) as negative and every other
//! class as positive; the score of a window is `1 − P(background)`.

mod checkpoint;
mod metrics;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, MixdownSpec, OptimSlotData, OptimizerMeta,
    PreprocessSnapshot, SCHEMA_VERSION,
};
pub use metrics::{
    compute_metrics, f1_score, roc_auc, roc_curve, youden_threshold, Metrics, RocPoint,
};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::annotations::{
    balanced_sampler, filter_annotations, load_annotations, segment_dataset, split_by_group,
    BalancedSampler, DatasetMode, DatasetSpec, FilterRules, GroupKey, LabeledSegment,
};
use crate::audio::{decode_wav, mixdown, resample, AudioClip};
use crate::augment::{apply_chain, Augmentation, AugmentationChain, ChainEntry};
use crate::config::{ResolvedConfig, Value};
use crate::dsp::{
    preprocess_segment, DbSettings, GridNorm, MelSettings, PcenParams, PreprocessConfig,
    WaveformNorm,
};
use crate::error::{Error, Result};
use crate::nn::{
    build_model, forward, forward_eval, softmax, Architecture, Mode, Model, ModelSpec, Tensor,
    BN_MOMENTUM,
};
use crate::optim::{OptimState, OptimizerKind};
use crate::rng::{self, Stream};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Model-group settings (everything but the derived input dimensions).
#[derive(Debug, Clone)]
pub struct ModelSettings {
    pub architecture: Architecture,
    pub use_pcen_frontend: bool,
    pub pcen: PcenParams,
    pub base_width: usize,
    pub hidden_dim: usize,
}

/// The resolved configuration, decoded into typed settings.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub audio_dir: PathBuf,
    pub annotations_path: PathBuf,
    pub sample_rate: u32,
    pub segment_len_s: f64,
    pub batch_size: usize,
    pub dataset_mode: DatasetMode,
    pub overlap_threshold: f64,
    pub classes: Vec<String>,
    pub mixdown: MixdownSpec,
    pub group_key: GroupKey,
    pub ratios: (f64, f64),
    pub filters: FilterRules,
    pub chain: AugmentationChain,
    pub preprocess: PreprocessConfig,
    pub model: ModelSettings,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub run_id: i64,
    pub group_name: String,
    /// Serialized snapshot of the resolved configuration.
    pub config_yaml: String,
}

impl TrainerConfig {
    pub fn segment_samples(&self) -> usize {
        (self.segment_len_s * self.sample_rate as f64).round() as usize
    }

    pub fn preprocess_snapshot(&self) -> PreprocessSnapshot {
        PreprocessSnapshot {
            sample_rate: self.sample_rate,
            segment_len_s: self.segment_len_s,
            mixdown: self.mixdown,
            pipeline: self.preprocess.clone(),
            dataset_mode: self.dataset_mode,
            overlap_threshold: self.overlap_threshold,
        }
    }

    /// Builds the model spec for the configured preprocessing output.
    pub fn model_spec(&self) -> ModelSpec {
        let (bins, frames) = self.preprocess.output_dims(self.segment_samples());
        ModelSpec {
            architecture: self.model.architecture,
            num_classes: self.classes.len(),
            input_bins: bins,
            input_frames: frames,
            use_pcen_frontend: self.model.use_pcen_frontend,
            pcen: self.pcen_params(),
            base_width: self.model.base_width,
            hidden_dim: self.model.hidden_dim,
        }
    }

    fn pcen_params(&self) -> PcenParams {
        self.model.pcen
    }
}

/// Decodes a [`ResolvedConfig`] into trainer settings.
pub fn parse_trainer_config(cfg: &ResolvedConfig) -> Result<TrainerConfig> {
    let classes: Vec<String> = cfg
        .get_list("data.classes")?
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::Config("data.classes entries must be strings".into()))
        })
        .collect::<Result<_>>()?;
    if classes.len() < 2 {
        return Err(Error::Config("data.classes needs at least two classes".into()));
    }

    let dataset_mode = match cfg.get_str("data.mode")? {
        "with-background" => DatasetMode::WithBackground,
        "no-background" => DatasetMode::NoBackground,
        other => {
            return Err(Error::Config(format!(
                "data.mode `{other}` (expected with-background or no-background)"
            )))
        }
    };

    let mixdown = match cfg.group("data")?.get("mixdown") {
        Some(Value::Str(s)) if s == "average" => MixdownSpec::Average,
        Some(Value::Int(k)) if *k >= 0 => MixdownSpec::Select { channel: *k as usize },
        Some(other) => {
            return Err(Error::Config(format!(
                "data.mixdown must be `average` or a channel index, got {other}"
            )))
        }
        None => MixdownSpec::Average,
    };

    let group_key = match cfg.get_str("data.split.group_key")? {
        "filename" => GroupKey::Filename,
        "date-prefix" => GroupKey::DatePrefix,
        other => return Err(Error::Config(format!("data.split.group_key `{other}`"))),
    };

    let filters = FilterRules {
        exclude_files: cfg
            .get_list("data.filters.exclude_files")?
            .iter()
            .filter_map(|v| v.as_str().map(str::to_string))
            .collect(),
        drop_duration_equals: match cfg.get_f64("data.filters.drop_duration_equals")? {
            v if v > 0.0 => Some(v),
            _ => None,
        },
        keep_labels: cfg
            .get_list("data.filters.keep_labels")?
            .iter()
            .filter_map(|v| v.as_str().map(str::to_string))
            .collect(),
    };

    // Augmentation chain entries come in configuration order.
    let mut entries = Vec::new();
    if let Value::Map(groups) = cfg.group("augmentations")? {
        for (name, body) in groups {
            let p = body
                .get("p")
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::Config(format!("augmentations.{name}.p missing")))?;
            let get = |field: &str| -> Result<f64> {
                body.get(field).and_then(Value::as_f64).ok_or_else(|| {
                    Error::Config(format!("augmentations.{name}.{field} missing"))
                })
            };
            let augmentation = match name.as_str() {
                "noise" => Augmentation::GaussianNoise {
                    snr_db_min: get("snr_db_min")?,
                    snr_db_max: get("snr_db_max")?,
                },
                "time_mask" => Augmentation::TimeMask { max_mask_frac: get("max_mask_frac")? },
                "freq_mask" => Augmentation::FreqMask { max_band_hz: get("max_band_hz")? },
                other => {
                    return Err(Error::Config(format!("unknown augmentation `{other}`")))
                }
            };
            entries.push(ChainEntry { augmentation, p });
        }
    }
    let chain = AugmentationChain {
        entries,
        train_aug_p: cfg.get_f64("data.train_dataset.augmentations_p")?,
    };
    chain.validate()?;

    let waveform_norm = match cfg.get_str("preprocessors.waveform_norm")? {
        "none" => WaveformNorm::None,
        "peak" => WaveformNorm::Peak,
        "unit" => WaveformNorm::Unit,
        other => return Err(Error::Config(format!("preprocessors.waveform_norm `{other}`"))),
    };
    let mel = if cfg.get_bool("preprocessors.mel.enabled")? {
        Some(MelSettings {
            n_mels: cfg.get_usize("preprocessors.mel.n_mels")?,
            fmin: cfg.get_f64("preprocessors.mel.fmin")?,
            fmax: cfg.get_f64("preprocessors.mel.fmax")?,
        })
    } else {
        None
    };
    let db = if cfg.get_bool("preprocessors.db.enabled")? {
        Some(DbSettings {
            eps: cfg.get_f64("preprocessors.db.eps")?,
            top_db: match cfg.get_f64("preprocessors.db.top_db")? {
                v if v > 0.0 => Some(v),
                _ => None,
            },
        })
    } else {
        None
    };
    let grid_norm = match cfg.get_str("preprocessors.grid_norm.method")? {
        "none" => GridNorm::None,
        "sliding" => GridNorm::Sliding {
            win_frames: cfg.get_usize("preprocessors.grid_norm.win_frames")?,
        },
        other => return Err(Error::Config(format!("preprocessors.grid_norm.method `{other}`"))),
    };
    let preprocess = PreprocessConfig {
        waveform_norm,
        nfft: cfg.get_usize("preprocessors.spectrogram.nfft")?,
        hop: cfg.get_usize("preprocessors.spectrogram.hop")?,
        mel,
        db,
        grid_norm,
    };

    let model = ModelSettings {
        architecture: cfg.get_str("model.architecture")?.parse()?,
        use_pcen_frontend: cfg.get_bool("model.use_pcen_frontend")?,
        pcen: PcenParams {
            alpha: cfg.get_f64("model.pcen.alpha")?,
            delta: cfg.get_f64("model.pcen.delta")?,
            root: cfg.get_f64("model.pcen.root")?,
            smoothing: cfg.get_f64("model.pcen.smoothing")?,
            eps: cfg.get_f64("model.pcen.eps")?,
            trainable: cfg.get_bool("model.pcen.trainable")?,
        },
        base_width: cfg.get_usize("model.base_width")?,
        hidden_dim: cfg.get_usize("model.hidden_dim")?,
    };
    if model.use_pcen_frontend && db.is_some() {
        return Err(Error::Config(
            "use_pcen_frontend requires preprocessors.db.enabled=false (PCEN needs non-negative energies)"
                .into(),
        ));
    }

    let optimizer = match cfg.get_str("optim.optimizer")? {
        "adam" => OptimizerKind::Adam {
            beta1: cfg.get_f64("optim.beta1")?,
            beta2: cfg.get_f64("optim.beta2")?,
            eps: cfg.get_f64("optim.eps")?,
        },
        "sgd" => OptimizerKind::Sgd { momentum: cfg.get_f64("optim.momentum")? },
        other => return Err(Error::Config(format!("optim.optimizer `{other}`"))),
    };

    Ok(TrainerConfig {
        audio_dir: PathBuf::from(cfg.get_str("data.audio_dir")?),
        annotations_path: PathBuf::from(cfg.get_str("data.annotations")?),
        sample_rate: cfg.get_usize("data.sample_rate")? as u32,
        segment_len_s: cfg.get_f64("data.segment_len_s")?,
        batch_size: cfg.get_usize("data.batch_size")?.max(1),
        dataset_mode,
        overlap_threshold: cfg.get_f64("data.overlap_threshold")?,
        classes,
        mixdown,
        group_key,
        ratios: (cfg.get_f64("data.split.train_ratio")?, cfg.get_f64("data.split.val_ratio")?),
        filters,
        chain,
        preprocess,
        model,
        optimizer,
        lr: cfg.get_f64("optim.lr")?,
        gamma: cfg.get_f64("optim.gamma")?,
        epochs: cfg.get_usize("optim.epochs")?,
        patience: cfg.get_usize("optim.patience")?,
        weight_decay: cfg.get_f64("optim.weight_decay")?,
        seed: cfg.get_i64("experiment.manual_seed")? as u64,
        run_id: cfg.get_i64("experiment.run_id")?,
        group_name: cfg.get_str("experiment.group_name")?.to_string(),
        config_yaml: cfg.emit(),
    })
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

/// Decoded clips plus the labeled train/val segments.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub clips: BTreeMap<String, AudioClip>,
    pub train: Vec<LabeledSegment>,
    pub val: Vec<LabeledSegment>,
    pub classes: Vec<String>,
    pub sample_rate: u32,
    pub segment_samples: usize,
}

/// Loads annotations and audio, then segments and splits them.
pub fn prepare_data(cfg: &TrainerConfig) -> Result<DataBundle> {
    let records = load_annotations(&cfg.annotations_path)?;
    let records = filter_annotations(&records, &cfg.filters);

    let mut clips = BTreeMap::new();
    let dir = std::fs::read_dir(&cfg.audio_dir).map_err(|e| Error::io(&cfg.audio_dir, e))?;
    let mut paths: Vec<PathBuf> = dir
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("wav"))
        .collect();
    paths.sort();
    for path in paths {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let clip = decode_wav(&path)?;
        let clip = resample(&clip, cfg.sample_rate)?;
        let clip = mixdown(&clip, cfg.mixdown.policy())?;
        clips.insert(name, clip);
    }
    if clips.is_empty() {
        return Err(Error::Train(format!("no .wav files under {}", cfg.audio_dir.display())));
    }

    let durations: BTreeMap<String, f64> =
        clips.iter().map(|(name, clip)| (name.clone(), clip.duration_s())).collect();
    let spec = DatasetSpec {
        segment_len_s: cfg.segment_len_s,
        mode: cfg.dataset_mode,
        overlap_threshold: cfg.overlap_threshold,
        classes: cfg.classes.clone(),
        seed: cfg.seed,
    };
    let segments = segment_dataset(&records, &durations, &spec)?;
    let (train, val) = split_by_group(&segments, cfg.group_key, cfg.ratios, cfg.seed)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Train("empty train or validation split".into()));
    }
    Ok(DataBundle {
        clips,
        train,
        val,
        classes: cfg.classes.clone(),
        sample_rate: cfg.sample_rate,
        segment_samples: cfg.segment_samples(),
    })
}

/// Extracts a fixed-length window of samples, zero-padded past the clip end.
pub fn segment_wave(clip: &AudioClip, begin_s: f64, samples: usize) -> Vec<f32> {
    let channel = &clip.samples[0];
    let start = (begin_s * clip.sample_rate as f64).round() as usize;
    let mut out = vec![0.0f32; samples];
    if start < channel.len() {
        let take = samples.min(channel.len() - start);
        out[..take].copy_from_slice(&channel[start..start + take]);
    }
    out
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Eval-mode scores for a batch of segments.
#[derive(Debug, Clone)]
pub struct EvalResult {
    /// Binary labels: 1 for any non-background class.
    pub labels: Vec<u8>,
    /// `1 − P(background)` per segment.
    pub scores: Vec<f64>,
    pub loss: f64,
    pub metrics: Metrics,
}

/// Runs the model over segments in order (no augmentation, no balancing)
/// and computes binary metrics at the given threshold.
pub fn evaluate_segments(
    model: &Model,
    clips: &BTreeMap<String, AudioClip>,
    segments: &[LabeledSegment],
    preprocess: &PreprocessConfig,
    segment_samples: usize,
    batch_size: usize,
    threshold: f64,
) -> Result<EvalResult> {
    if segments.is_empty() {
        return Err(Error::Train("cannot evaluate an empty segment list".into()));
    }
    let num_classes = model.spec.num_classes;
    let mut labels = Vec::with_capacity(segments.len());
    let mut scores = Vec::with_capacity(segments.len());
    let mut loss_sum = 0.0f64;

    for chunk in segments.chunks(batch_size.max(1)) {
        let refs: Vec<&LabeledSegment> = chunk.iter().collect();
        let (batch, class_labels) =
            assemble_batch(&refs, clips, None, preprocess, segment_samples)?;
        let logits = forward_eval(model, &batch)?;
        let probs = softmax(&logits);
        for (i, seg) in chunk.iter().enumerate() {
            let row = &probs.data()[i * num_classes..(i + 1) * num_classes];
            labels.push(u8::from(seg.class_index > 0));
            scores.push(1.0 - row[0] as f64);
            loss_sum += -(row[class_labels[i]] as f64).max(1e-12).ln();
        }
    }

    let loss = loss_sum / segments.len() as f64;
    let metrics = compute_metrics(&labels, &scores, threshold)?;
    Ok(EvalResult { labels, scores, loss, metrics })
}

/// Preprocesses a run of segments into one `[N, 1, F, T]` batch.
fn assemble_batch(
    segments: &[&LabeledSegment],
    clips: &BTreeMap<String, AudioClip>,
    augment: Option<(&AugmentationChain, &mut ChaCha8Rng, u32)>,
    preprocess: &PreprocessConfig,
    segment_samples: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (bins, frames) = preprocess.output_dims(segment_samples);
    let mut batch = Tensor::zeros(&[segments.len(), 1, bins, frames]);
    let mut labels = Vec::with_capacity(segments.len());
    let mut augment = augment;
    for (i, seg) in segments.iter().enumerate() {
        let clip = clips
            .get(&seg.filename)
            .ok_or_else(|| Error::Train(format!("no clip loaded for `{}`", seg.filename)))?;
        let mut wave = segment_wave(clip, seg.begin_s, segment_samples);
        if let Some((chain, rng, sr)) = augment.as_mut() {
            wave = apply_chain(&wave, chain, *sr, rng);
        }
        let grid = preprocess_segment(&wave, clip.sample_rate, preprocess)?;
        if (grid.bins, grid.frames) != (bins, frames) {
            return Err(Error::Shape(format!(
                "segment grid {}x{} vs expected {}x{}",
                grid.bins, grid.frames, bins, frames
            )));
        }
        let dst = &mut batch.data_mut()[i * bins * frames..(i + 1) * bins * frames];
        dst.copy_from_slice(&grid.values);
        labels.push(seg.class_index);
    }
    Ok((batch, labels))
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

/// One epoch's logged measurements.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train: Metrics,
    pub val_loss: f64,
    pub val: Metrics,
    pub timestamp_ms: u64,
}

/// The complete log of one training run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub group_name: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

struct BestState {
    auc: f64,
    epoch: usize,
    model: Model,
}

/// An in-progress training run, advanced one epoch at a time.
///
/// Stepwise control exists so hyperparameter sweeps can pause runs at
/// rung boundaries; [`train`] drives a session to completion.
pub struct TrainSession {
    cfg: TrainerConfig,
    data: Arc<DataBundle>,
    model: Model,
    optim: OptimState,
    sampler: BalancedSampler,
    aug_rng: ChaCha8Rng,
    steps_per_epoch: usize,
    epoch: usize,
    best: Option<BestState>,
    epochs_no_improve: usize,
    records: Vec<EpochRecord>,
    out_dir: Option<PathBuf>,
}

impl TrainSession {
    /// Builds the model and sampler; creates the run directory (config
    /// snapshot included) when `out_dir` is given.
    pub fn new(cfg: TrainerConfig, data: DataBundle, out_dir: Option<PathBuf>) -> Result<TrainSession> {
        TrainSession::new_shared(cfg, Arc::new(data), out_dir)
    }

    /// Like [`TrainSession::new`], sharing one prepared bundle across runs.
    pub fn new_shared(
        cfg: TrainerConfig,
        data: Arc<DataBundle>,
        out_dir: Option<PathBuf>,
    ) -> Result<TrainSession> {
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::Train("empty train or validation split".into()));
        }
        let spec = cfg.model_spec();
        let model = build_model(&spec, cfg.seed)?;
        let mut optim = OptimState::new(cfg.optimizer, cfg.lr, cfg.gamma, model.params.len());
        optim.weight_decay = cfg.weight_decay;
        let sampler = balanced_sampler(&data.train, &data.classes, cfg.seed)?;
        let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);

        if let Some(dir) = &out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            std::fs::write(dir.join("config.yaml"), &cfg.config_yaml)
                .map_err(|e| Error::io(dir.join("config.yaml"), e))?;
            // Start the log fresh.
            std::fs::write(dir.join("log.jsonl"), b"")
                .map_err(|e| Error::io(dir.join("log.jsonl"), e))?;
        }

        let aug_rng = rng::derive(cfg.seed, Stream::Augment);
        Ok(TrainSession {
            cfg,
            data,
            model,
            optim,
            sampler,
            aug_rng,
            steps_per_epoch,
            epoch: 0,
            best: None,
            epochs_no_improve: 0,
            records: Vec::new(),
            out_dir,
        })
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    /// True once the epoch budget is exhausted or patience ran out.
    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs || self.epochs_no_improve >= self.cfg.patience
    }

    /// Runs one training epoch plus validation; returns its record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch + 1;
        let lr = self.optim.lr;
        let mut loss_sum = 0.0f64;
        let mut train_labels: Vec<u8> = Vec::new();
        let mut train_scores: Vec<f64> = Vec::new();
        let num_classes = self.data.classes.len();

        for step in 0..self.steps_per_epoch {
            let indices: Vec<usize> =
                (&mut self.sampler).take(self.cfg.batch_size).collect();
            let segs: Vec<&LabeledSegment> =
                indices.iter().map(|&i| &self.data.train[i]).collect();
            let (batch, labels) = assemble_batch(
                &segs,
                &self.data.clips,
                Some((&self.cfg.chain, &mut self.aug_rng, self.data.sample_rate)),
                &self.cfg.preprocess,
                self.data.segment_samples,
            )?;

            let mut fwd = forward(&self.model, &batch, Mode::Train)?;
            let loss = fwd.tape.softmax_cross_entropy(fwd.logits, &labels)?;
            let loss_value = fwd.tape.value(loss).item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::Train(format!(
                    "NaN loss at epoch {epoch}, batch {step}"
                )));
            }
            loss_sum += loss_value;

            let probs = softmax(fwd.tape.value(fwd.logits));
            for (i, &label) in labels.iter().enumerate() {
                train_labels.push(u8::from(label > 0));
                train_scores.push(1.0 - probs.data()[i * num_classes] as f64);
            }

            fwd.tape.backward(loss)?;
            fwd.write_grads(&mut self.model)?;
            fwd.apply_bn_updates(&mut self.model, BN_MOMENTUM);
            self.optim.step(&mut self.model)?;
            self.model.clear_grads();
        }

        let train_loss = loss_sum / self.steps_per_epoch as f64;
        let train_metrics = metrics_with_auc_fallback(&train_labels, &train_scores, 0.5);

        let val = evaluate_segments(
            &self.model,
            &self.data.clips,
            &self.data.val,
            &self.cfg.preprocess,
            self.data.segment_samples,
            self.cfg.batch_size,
            0.5,
        )?;

        self.optim.scheduler_step();
        self.epoch = epoch;

        let improved = match &self.best {
            None => true,
            Some(best) => val.metrics.auc > best.auc,
        };
        if improved {
            self.best = Some(BestState { auc: val.metrics.auc, epoch, model: self.model.clone() });
            self.epochs_no_improve = 0;
        } else {
            self.epochs_no_improve += 1;
        }

        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            train: train_metrics,
            val_loss: val.loss,
            val: val.metrics,
            timestamp_ms: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
        };
        if let Some(dir) = &self.out_dir {
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Train(format!("log serialization: {e}")))?;
            let path = dir.join("log.jsonl");
            let mut file = std::fs::OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        self.records.push(record.clone());
        Ok(record)
    }

    /// Latest validation AUC, if an epoch ran.
    pub fn last_val_auc(&self) -> Option<f64> {
        self.records.last().map(|r| r.val.auc)
    }

    /// Finalizes the run: writes `best.ckpt` / `last.ckpt` when an output
    /// directory was set, and returns the best-epoch checkpoint plus the
    /// experiment record.
    pub fn finish(self) -> Result<(Checkpoint, ExperimentRecord)> {
        let best = self
            .best
            .ok_or_else(|| Error::Train("no epochs ran; nothing to checkpoint".into()))?;
        let base = Checkpoint {
            model: best.model,
            class_names: self.data.classes.clone(),
            preprocess: self.cfg.preprocess_snapshot(),
            config_yaml: self.cfg.config_yaml.clone(),
            epoch: best.epoch as u64,
            best_metric: best.auc,
            optimizer: None,
        };
        let last_model = self.model;
        let last = Checkpoint {
            model: last_model.clone(),
            class_names: self.data.classes.clone(),
            preprocess: self.cfg.preprocess_snapshot(),
            config_yaml: self.cfg.config_yaml.clone(),
            epoch: self.epoch as u64,
            best_metric: best.auc,
            optimizer: None,
        }
        .with_optimizer(&self.optim, &last_model);

        if let Some(dir) = &self.out_dir {
            save_checkpoint(&base, &dir.join("best.ckpt"))?;
            save_checkpoint(&last, &dir.join("last.ckpt"))?;
        }

        let record = ExperimentRecord {
            run_id: format!("{}-{}", self.cfg.group_name, self.cfg.run_id),
            group_name: self.cfg.group_name.clone(),
            seed: self.cfg.seed,
            epochs: self.records,
            stopped_epoch: self.epoch,
            best_epoch: best.epoch,
            best_val_auc: best.auc,
        };
        Ok((base, record))
    }
}

/// Train metrics tolerate a single-class epoch (AUC falls back to 0.5);
/// threshold metrics are always well defined.
fn metrics_with_auc_fallback(labels: &[u8], scores: &[f64], threshold: f64) -> Metrics {
    match compute_metrics(labels, scores, threshold) {
        Ok(m) => m,
        Err(_) => {
            let preds: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
            let correct = labels
                .iter()
                .zip(&preds)
                .filter(|(&l, &p)| (l == 1) == p)
                .count();
            Metrics {
                accuracy: correct as f64 / labels.len().max(1) as f64,
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
                auc: 0.5,
            }
        }
    }
}

/// Loads data and trains to completion under `cfg`.
pub fn train(
    cfg: TrainerConfig,
    out_dir: Option<PathBuf>,
) -> Result<(Checkpoint, ExperimentRecord)> {
    let data = prepare_data(&cfg)?;
    train_prepared(cfg, data, out_dir)
}

/// Trains on an already-prepared data bundle.
pub fn train_prepared(
    cfg: TrainerConfig,
    data: DataBundle,
    out_dir: Option<PathBuf>,
) -> Result<(Checkpoint, ExperimentRecord)> {
    let mut session = TrainSession::new(cfg, data, out_dir)?;
    while !session.finished() {
        session.run_epoch()?;
    }
    session.finish()
}

/// Resumes from a checkpoint for finetuning: rebuilds the session with the
/// checkpoint's parameters and the requested trainability mask.
pub fn finetune(
    cfg: TrainerConfig,
    ckpt: &Checkpoint,
    mode: crate::optim::Trainability,
    out_dir: Option<PathBuf>,
) -> Result<(Checkpoint, ExperimentRecord)> {
    let data = prepare_data(&cfg)?;
    let mut session = TrainSession::new(cfg, data, out_dir)?;
    if session.model.spec != ckpt.model.spec {
        return Err(Error::Train(format!(
            "checkpoint model spec {:?} does not match the configured spec {:?}",
            ckpt.model.spec, session.model.spec
        )));
    }
    session.model = ckpt.model.clone();
    crate::optim::set_trainable(&mut session.model, mode)?;
    while !session.finished() {
        session.run_epoch()?;
    }
    session.finish()
}
