//! The `callpipe` command line.
//!
//! One binary, five subcommands: `train`, `finetune`, `infer`, `eval`,
//! `sweep`. Exit codes: 0 on success, 1 on usage errors, 2 on runtime
//! failures. Every subcommand writes a `config.yaml` snapshot of its
//! fully-resolved configuration into its output directory before doing
//! any work, and the `CALLPIPE_RUNS_DIR` environment variable overrides
//! the default `./runs` output root.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::annotations::load_annotations;
use crate::audio::{decode_wav, mixdown, resample};
use crate::config::{load_config, ResolvedConfig};
use crate::dsp::{amplitude_to_db, power_spectrogram};
use crate::error::{Error, Result};
use crate::inference::{
    detect, evaluate_recordings, export_raven, export_visualization, infer_file,
    write_predictions_csv,
};
use crate::optim::Trainability;
use crate::rng::{self, Stream};
use crate::sweep::{
    parameter_importance, parse_sweep_spec, run_sweep, write_importance_csv,
    write_leaderboard_csv, Candidate, EpochRun, Objective, SweepSpec,
};
use crate::trainer::{
    load_checkpoint, parse_trainer_config, prepare_data, train_prepared, youden_threshold, DataBundle, TrainSession, TrainerConfig,
};

#[derive(Parser)]
#[command(name = "callpipe", version, about = "Bioacoustic call detection and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train {
        /// Run file name (under `<conf-dir>/runs/`) or root-relative path.
        #[arg(long)]
        config_name: String,
        /// Configuration root directory.
        #[arg(long, default_value = "conf")]
        conf_dir: PathBuf,
        /// `group=name` or `path.to.leaf=value` overrides.
        overrides: Vec<String>,
    },
    /// Resume from a checkpoint, optionally training only the classifier head.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `all` or `head-only`.
        #[arg(long, default_value = "all")]
        mode: String,
        #[arg(long)]
        config_name: String,
        #[arg(long, default_value = "conf")]
        conf_dir: PathBuf,
        overrides: Vec<String>,
    },
    /// Run a trained model over recordings.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A .wav file or a directory of .wav files.
        #[arg(long)]
        audio: PathBuf,
        /// Optional annotations; enables metrics.json.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Detection decision threshold on the positive-class probability.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Minimum consecutive hot windows per detection event.
        #[arg(long, default_value_t = 1)]
        min_event_windows: usize,
        /// Emit a plot-data bundle per recording.
        #[arg(long)]
        plot: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against annotated recordings.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a hyperparameter sweep.
    Sweep {
        /// Sweep definition file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        config_name: String,
        /// Maximum number of runs.
        #[arg(long)]
        budget: usize,
        /// Bounded worker pool for advancing runs.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "conf")]
        conf_dir: PathBuf,
        overrides: Vec<String>,
    },
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let mut argv = vec!["callpipe".to_string()];
    argv.extend(args);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train { config_name, conf_dir, overrides } => {
            cmd_train(&conf_dir, &config_name, &overrides)
        }
        Command::Finetune { checkpoint, mode, config_name, conf_dir, overrides } => {
            cmd_finetune(&checkpoint, &mode, &conf_dir, &config_name, &overrides)
        }
        Command::Infer { checkpoint, audio, annotations, threshold, min_event_windows, plot, out } => {
            cmd_infer(&checkpoint, &audio, annotations.as_deref(), threshold, min_event_windows, plot, &out)
        }
        Command::Eval { checkpoint, audio, annotations, threshold, out } => {
            cmd_eval(&checkpoint, &audio, &annotations, threshold, &out)
        }
        Command::Sweep { spec, config_name, budget, workers, conf_dir, overrides } => {
            cmd_sweep(&spec, &conf_dir, &config_name, budget, workers, &overrides)
        }
    }
}

/// Output root: `CALLPIPE_RUNS_DIR` or `./runs`.
fn runs_root() -> PathBuf {
    std::env::var_os("CALLPIPE_RUNS_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn run_dir(config_name: &str, run_id: i64) -> PathBuf {
    let name = config_name.replace('/', "-");
    runs_root().join(format!("{name}-{run_id}"))
}

fn resolve(conf_dir: &Path, config_name: &str, overrides: &[String]) -> Result<ResolvedConfig> {
    load_config(conf_dir, config_name, overrides)
}

fn cmd_train(conf_dir: &Path, config_name: &str, overrides: &[String]) -> Result<()> {
    let resolved = resolve(conf_dir, config_name, overrides)?;
    let cfg = parse_trainer_config(&resolved)?;
    let out_dir = run_dir(config_name, cfg.run_id);
    let data = prepare_data(&cfg)?;
    let (ckpt, record) = train_prepared(cfg, data, Some(out_dir.clone()))?;
    println!(
        "trained {} epochs; best val AUC {:.4} at epoch {}; outputs in {}",
        record.stopped_epoch,
        ckpt.best_metric,
        record.best_epoch,
        out_dir.display()
    );
    Ok(())
}

fn cmd_finetune(
    checkpoint: &Path,
    mode: &str,
    conf_dir: &Path,
    config_name: &str,
    overrides: &[String],
) -> Result<()> {
    let mode: Trainability = mode.parse()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let resolved = resolve(conf_dir, config_name, overrides)?;
    let cfg = parse_trainer_config(&resolved)?;
    let out_dir = run_dir(&format!("{config_name}-finetune"), cfg.run_id);
    let (new_ckpt, record) = crate::trainer::finetune(cfg, &ckpt, mode, Some(out_dir.clone()))?;
    println!(
        "finetuned {} epochs; best val AUC {:.4}; outputs in {}",
        record.stopped_epoch,
        new_ckpt.best_metric,
        out_dir.display()
    );
    Ok(())
}

/// Collects the .wav files under a path (a single file or a directory).
fn collect_audio(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("wav"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Inference(format!("no .wav files under {}", path.display())));
    }
    Ok(files)
}

fn write_config_snapshot(dir: &Path, yaml: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    std::fs::write(dir.join("config.yaml"), yaml).map_err(|e| Error::io(dir.join("config.yaml"), e))
}

fn cmd_infer(
    checkpoint: &Path,
    audio: &Path,
    annotations: Option<&Path>,
    threshold: f64,
    min_event_windows: usize,
    plot: bool,
    out: &Path,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    write_config_snapshot(out, &ckpt.config_yaml)?;

    let files = collect_audio(audio)?;
    let mut clips = Vec::new();
    for path in &files {
        let mut clip = decode_wav(path)?;
        // Keyed by bare filename so annotations can reference them.
        clip.source_path =
            path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        clips.push(clip);
    }

    let mut all_rows = Vec::new();
    let mut all_events = Vec::new();
    let nyquist = ckpt.preprocess.sample_rate as f64 / 2.0;
    for clip in &clips {
        let rows = infer_file(&ckpt, clip)?;
        let events = detect(&rows, threshold, min_event_windows);
        if plot && !rows.is_empty() {
            let prepared = mixdown(
                &resample(clip, ckpt.preprocess.sample_rate)?,
                ckpt.preprocess.mixdown.policy(),
            )?;
            let pipeline = &ckpt.preprocess.pipeline;
            let grid = power_spectrogram(
                &prepared.samples[0],
                pipeline.nfft,
                pipeline.hop,
                prepared.sample_rate,
            )?;
            let grid = amplitude_to_db(&grid, 1e-10, Some(80.0))?;
            let stem = clip.source_path.trim_end_matches(".wav");
            export_visualization(&rows, &grid, threshold, &out.join("plots").join(stem))?;
        }
        all_rows.extend(rows);
        all_events.extend(events);
    }

    write_predictions_csv(&all_rows, &ckpt.class_names, &out.join("predictions.csv"))?;
    export_raven(&all_events, &out.join("detections.txt"), (0.0, nyquist))?;

    if let Some(annotations) = annotations {
        let records = load_annotations(annotations)?;
        let eval = evaluate_recordings(&ckpt, &clips, &records, threshold)?;
        if eval.skipped_files > 0 {
            eprintln!("warning: {} file(s) had no annotations and were skipped", eval.skipped_files);
        }
        let json = serde_json::json!({
            "metrics": eval.metrics,
            "windows": eval.windows,
            "skipped_files": eval.skipped_files,
            "threshold": threshold,
        });
        std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&json).unwrap())
            .map_err(|e| Error::io(out.join("metrics.json"), e))?;
    }
    println!(
        "{} windows scored, {} events detected; outputs in {}",
        all_rows.len(),
        all_events.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    audio: &Path,
    annotations: &Path,
    threshold: f64,
    out: &Path,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    write_config_snapshot(out, &ckpt.config_yaml)?;

    let files = collect_audio(audio)?;
    let mut clips = Vec::new();
    for path in &files {
        let mut clip = decode_wav(path)?;
        clip.source_path =
            path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        clips.push(clip);
    }
    let records = load_annotations(annotations)?;
    let eval = evaluate_recordings(&ckpt, &clips, &records, threshold)?;
    if eval.skipped_files > 0 {
        eprintln!("warning: {} file(s) had no annotations and were skipped", eval.skipped_files);
    }
    // Re-derive the ROC-optimal operating point alongside the fixed one.
    let youden = youden_threshold(&eval.labels, &eval.scores)?;
    let json = serde_json::json!({
        "metrics": eval.metrics,
        "windows": eval.windows,
        "skipped_files": eval.skipped_files,
        "threshold": threshold,
        "youden_threshold": youden,
    });
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&json).unwrap())
        .map_err(|e| Error::io(out.join("metrics.json"), e))?;
    println!(
        "AUC {:.4}, F1 {:.4} over {} windows; metrics in {}",
        eval.metrics.auc,
        eval.metrics.f1,
        eval.windows,
        out.join("metrics.json").display()
    );
    Ok(())
}

/// Launches real training runs for sweep candidates, reusing prepared data
/// across runs with identical data settings.
struct TrainerObjective {
    conf_dir: PathBuf,
    config_name: String,
    base_overrides: Vec<String>,
    metric: MetricSelector,
    sweep_dir: PathBuf,
    data_cache: BTreeMap<String, Arc<DataBundle>>,
}

#[derive(Clone, Copy)]
enum MetricSelector {
    Auc,
    Accuracy,
    Precision,
    Recall,
    F1,
    ValLoss,
}

impl MetricSelector {
    fn parse(name: &str) -> Result<MetricSelector> {
        Ok(match name {
            "auc" => MetricSelector::Auc,
            "accuracy" => MetricSelector::Accuracy,
            "precision" => MetricSelector::Precision,
            "recall" => MetricSelector::Recall,
            "f1" => MetricSelector::F1,
            "loss" | "val_loss" => MetricSelector::ValLoss,
            other => return Err(Error::Sweep(format!("unknown sweep metric `{other}`"))),
        })
    }

    fn pick(self, record: &crate::trainer::EpochRecord) -> f64 {
        match self {
            MetricSelector::Auc => record.val.auc,
            MetricSelector::Accuracy => record.val.accuracy,
            MetricSelector::Precision => record.val.precision,
            MetricSelector::Recall => record.val.recall,
            MetricSelector::F1 => record.val.f1,
            MetricSelector::ValLoss => record.val_loss,
        }
    }
}

/// Cache key: the parts of the config that shape the data bundle.
fn data_key(cfg: &TrainerConfig) -> String {
    format!(
        "{}|{}|{}|{}|{:?}|{}|{:?}|{:?}|{:?}|{:?}|{}",
        cfg.audio_dir.display(),
        cfg.annotations_path.display(),
        cfg.sample_rate,
        cfg.segment_len_s,
        cfg.dataset_mode,
        cfg.overlap_threshold,
        cfg.classes,
        cfg.mixdown,
        cfg.group_key,
        cfg.filters,
        cfg.seed,
    )
}

struct SessionRun {
    session: Option<TrainSession>,
    metric: MetricSelector,
}

impl EpochRun for SessionRun {
    fn step(&mut self) -> Result<Option<f64>> {
        let Some(session) = self.session.as_mut() else { return Ok(None) };
        if session.finished() {
            let session = self.session.take().unwrap();
            session.finish()?;
            return Ok(None);
        }
        let record = session.run_epoch()?;
        Ok(Some(self.metric.pick(&record)))
    }
}

impl Objective for TrainerObjective {
    fn start(&mut self, run_index: usize, candidate: &Candidate) -> Result<Box<dyn EpochRun>> {
        let mut overrides = self.base_overrides.clone();
        overrides.extend(candidate.override_tokens());
        let resolved = load_config(&self.conf_dir, &self.config_name, &overrides)?;
        let cfg = parse_trainer_config(&resolved)?;

        let key = data_key(&cfg);
        let data = match self.data_cache.get(&key) {
            Some(data) => Arc::clone(data),
            None => {
                let data = Arc::new(prepare_data(&cfg)?);
                self.data_cache.insert(key, Arc::clone(&data));
                data
            }
        };
        let run_dir = self.sweep_dir.join(format!("run{run_index:03}"));
        let session = TrainSession::new_shared(cfg, data, Some(run_dir))?;
        Ok(Box::new(SessionRun { session: Some(session), metric: self.metric }))
    }
}

fn cmd_sweep(
    spec_path: &Path,
    conf_dir: &Path,
    config_name: &str,
    budget: usize,
    workers: usize,
    overrides: &[String],
) -> Result<()> {
    let spec: SweepSpec = parse_sweep_spec(spec_path)?;
    if let Some(from) = &spec.downgraded_from {
        eprintln!("note: sweep method `{from}` is not supported; using random search");
    }
    let resolved = resolve(conf_dir, config_name, overrides)?;
    let base_cfg = parse_trainer_config(&resolved)?;

    let sweep_dir = runs_root()
        .join("sweeps")
        .join(format!("{}-{}", config_name.replace('/', "-"), base_cfg.seed));
    write_config_snapshot(&sweep_dir, &resolved.emit())?;

    let metric = MetricSelector::parse(&spec.metric_name)?;
    let mut objective = TrainerObjective {
        conf_dir: conf_dir.to_path_buf(),
        config_name: config_name.to_string(),
        base_overrides: overrides.to_vec(),
        metric,
        sweep_dir: sweep_dir.clone(),
        data_cache: BTreeMap::new(),
    };
    let mut rng = rng::derive(base_cfg.seed, Stream::Sweep);
    let results = run_sweep(&spec, budget, workers, &mut rng, &mut objective)?;

    write_leaderboard_csv(&results, &sweep_dir.join("leaderboard.csv"))?;
    match parameter_importance(&results) {
        Ok(entries) => write_importance_csv(&entries, &sweep_dir.join("importance.csv"))?,
        Err(e) => eprintln!("note: skipping importance report: {e}"),
    }
    if let Some(best) = results.first() {
        println!(
            "sweep complete: {} runs; best run {} with {} = {:?}; outputs in {}",
            results.len(),
            best.run_index,
            spec.metric_name,
            best.final_metric,
            sweep_dir.display()
        );
    }
    Ok(())
}
