//! Sliding-window inference, detection events, and exports.
//!
//! A trained checkpoint carries its preprocessing snapshot, so inference
//! needs nothing but audio: clips are resampled and mixed down to the
//! training setup, tiled into windows of the training segment length
//! (hop = window, so the output time resolution matches the training
//! data), and scored in eval mode. The final partial window is zero-padded
//! to full length and flagged.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::annotations::{segment_dataset, AnnotationRecord, DatasetSpec, RAVEN_HEADER};
use crate::audio::{mixdown, resample, AudioClip};
use crate::dsp::{preprocess_segment, TimeFreqGrid};
use crate::error::{Error, Result};
use crate::nn::{forward_eval, softmax, Tensor};
use crate::trainer::{evaluate_segments, Checkpoint, Metrics};

/// Per-window class probabilities for one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub filename: String,
    pub channel: u32,
    pub begin_s: f64,
    pub end_s: f64,
    /// One probability per class, ordered by class index; sums to 1.
    pub probabilities: Vec<f64>,
    pub predicted_label: String,
    /// True for the zero-padded final window.
    pub padded: bool,
}

impl PredictionRow {
    /// `1 − P(background)`, the binary detection score.
    pub fn positive_score(&self) -> f64 {
        1.0 - self.probabilities[0]
    }
}

/// A merged run of above-threshold windows.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEvent {
    pub filename: String,
    pub channel: u32,
    pub begin_s: f64,
    pub end_s: f64,
    pub peak_probability: f64,
    pub label: String,
}

/// Scores a whole recording with a trained checkpoint.
///
/// The clip is resampled and mixed down internally using the checkpoint's
/// stored preprocessing snapshot. Rows come back in time order.
pub fn infer_file(ckpt: &Checkpoint, clip: &AudioClip) -> Result<Vec<PredictionRow>> {
    let snapshot = &ckpt.preprocess;
    let clip = resample(clip, snapshot.sample_rate)?;
    let clip = mixdown(&clip, snapshot.mixdown.policy())?;
    let window = snapshot.segment_samples();
    let frames = clip.frames();
    if frames == 0 || window == 0 {
        return Ok(Vec::new());
    }
    let n_windows = frames.div_ceil(window);
    let classes = &ckpt.class_names;
    let num_classes = classes.len();
    let (bins, grid_frames) = snapshot.pipeline.output_dims(window);

    let mut rows = Vec::with_capacity(n_windows);
    let batch_size = 64usize;
    let mut w = 0usize;
    while w < n_windows {
        let count = batch_size.min(n_windows - w);
        let mut batch = Tensor::zeros(&[count, 1, bins, grid_frames]);
        for i in 0..count {
            let start = (w + i) * window;
            let mut wave = vec![0.0f32; window];
            let take = window.min(frames - start);
            wave[..take].copy_from_slice(&clip.samples[0][start..start + take]);
            let grid = preprocess_segment(&wave, snapshot.sample_rate, &snapshot.pipeline)?;
            batch.data_mut()[i * bins * grid_frames..(i + 1) * bins * grid_frames]
                .copy_from_slice(&grid.values);
        }
        let logits = forward_eval(&ckpt.model, &batch)?;
        let probs = softmax(&logits);
        for i in 0..count {
            let row = &probs.data()[i * num_classes..(i + 1) * num_classes];
            let probabilities: Vec<f64> = row.iter().map(|&p| p as f64).collect();
            let argmax = (0..num_classes)
                .max_by(|&a, &b| probabilities[a].partial_cmp(&probabilities[b]).unwrap())
                .unwrap();
            // End times are computed exactly like the next window's begin
            // so adjacent rows are contiguous in event merging.
            let begin = ((w + i) * window) as f64 / snapshot.sample_rate as f64;
            let end = ((w + i + 1) * window) as f64 / snapshot.sample_rate as f64;
            rows.push(PredictionRow {
                filename: clip.source_path.clone(),
                channel: 1,
                begin_s: begin,
                end_s: end,
                probabilities,
                predicted_label: classes[argmax].clone(),
                padded: (w + i + 1) * window > frames,
            });
        }
        w += count;
    }
    Ok(rows)
}

/// Writes prediction rows as CSV with 6-decimal fixed-point values.
///
/// Header: `filename,channel,begin_time,end_time,<class_0>,...,<class_k>,predicted_label`.
pub fn write_predictions_csv(rows: &[PredictionRow], classes: &[String], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("filename,channel,begin_time,end_time");
    for class in classes {
        out.push(',');
        out.push_str(class);
    }
    out.push_str(",predicted_label\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}",
            row.filename, row.channel, row.begin_s, row.end_s
        ));
        for p in &row.probabilities {
            out.push_str(&format!(",{p:.6}"));
        }
        out.push(',');
        out.push_str(&row.predicted_label);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a predictions CSV back; returns the rows and the class names
/// found in the header.
pub fn read_predictions_csv(path: &Path) -> Result<(Vec<PredictionRow>, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Inference("empty predictions file".into()))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 6
        || columns[..4] != ["filename", "channel", "begin_time", "end_time"]
        || *columns.last().unwrap() != "predicted_label"
    {
        return Err(Error::Inference(format!("unexpected predictions header `{header}`")));
    }
    let classes: Vec<String> =
        columns[4..columns.len() - 1].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::Inference(format!("line {}: wrong field count", i + 2)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Inference(format!("line {}: bad number `{s}`", i + 2)))
        };
        rows.push(PredictionRow {
            filename: fields[0].to_string(),
            channel: parse(fields[1])? as u32,
            begin_s: parse(fields[2])?,
            end_s: parse(fields[3])?,
            probabilities: fields[4..fields.len() - 1]
                .iter()
                .map(|s| parse(s))
                .collect::<Result<_>>()?,
            predicted_label: fields[fields.len() - 1].to_string(),
            padded: false,
        });
    }
    Ok((rows, classes))
}

/// Merges runs of above-threshold windows into events.
///
/// Windows with positive score `>= threshold` are marked; maximal runs of
/// at least `min_event_windows` consecutive marked windows become one
/// event spanning first-begin to last-end, with the run's peak
/// probability. Raising the threshold never grows the detected duration.
pub fn detect(rows: &[PredictionRow], threshold: f64, min_event_windows: usize) -> Vec<DetectionEvent> {
    let min_run = min_event_windows.max(1);
    let mut events = Vec::new();
    let mut run: Vec<&PredictionRow> = Vec::new();

    let flush = |run: &mut Vec<&PredictionRow>, events: &mut Vec<DetectionEvent>| {
        if run.len() >= min_run {
            let peak = run
                .iter()
                .max_by(|a, b| a.positive_score().partial_cmp(&b.positive_score()).unwrap())
                .unwrap();
            // Label from the peak window: the strongest non-background class.
            let label_idx = (1..peak.probabilities.len())
                .max_by(|&a, &b| {
                    peak.probabilities[a].partial_cmp(&peak.probabilities[b]).unwrap()
                })
                .unwrap_or(0);
            events.push(DetectionEvent {
                filename: run[0].filename.clone(),
                channel: run[0].channel,
                begin_s: run[0].begin_s,
                end_s: run[run.len() - 1].end_s,
                peak_probability: peak.positive_score(),
                label: peak.predicted_label_or(label_idx),
            });
        }
        run.clear();
    };

    for row in rows {
        let marked = row.positive_score() >= threshold;
        let contiguous = run.last().is_none_or(|prev| {
            prev.filename == row.filename
                && prev.channel == row.channel
                && (row.begin_s - prev.end_s).abs() < 1e-9
        });
        if marked && contiguous {
            run.push(row);
        } else {
            flush(&mut run, &mut events);
            if marked {
                run.push(row);
            }
        }
    }
    flush(&mut run, &mut events);
    events
}

impl PredictionRow {
    /// The class name at `index`, falling back to the stored prediction.
    fn predicted_label_or(&self, index: usize) -> String {
        if self.probabilities.len() > 1 && index >= 1 {
            // The caller picked a non-background index; map it through the
            // prediction the row already carries when they coincide.
            if self.predicted_label_index() == Some(index) {
                return self.predicted_label.clone();
            }
        }
        self.predicted_label.clone()
    }

    fn predicted_label_index(&self) -> Option<usize> {
        (0..self.probabilities.len())
            .max_by(|&a, &b| self.probabilities[a].partial_cmp(&self.probabilities[b]).unwrap())
    }
}

/// Writes events as a Raven-compatible selection table.
///
/// Tab-separated with the standard header; `Selection` is the 1-based
/// index, `View` is `Spectrogram 1`, times and frequencies carry 6
/// decimals. `band` fills the Low/High Freq columns.
pub fn export_raven(events: &[DetectionEvent], path: &Path, band: (f64, f64)) -> Result<()> {
    let mut out = String::new();
    out.push_str(&RAVEN_HEADER.join("\t"));
    out.push('\n');
    for (i, event) in events.iter().enumerate() {
        out.push_str(&format!(
            "{}\tSpectrogram 1\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
            i + 1,
            event.channel,
            event.begin_s,
            event.end_s,
            band.0,
            band.1,
            event.label
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Metrics over annotated recordings, plus the count of supplied files
/// that had no annotations and were skipped.
#[derive(Debug, Clone)]
pub struct RecordingEval {
    pub metrics: Metrics,
    pub skipped_files: usize,
    /// Windows scored, after discarding sub-threshold overlaps.
    pub windows: usize,
    /// Binary window labels, for ROC analysis downstream.
    pub labels: Vec<u8>,
    /// Positive-class window scores, aligned with `labels`.
    pub scores: Vec<f64>,
}

/// Evaluates a checkpoint against annotated recordings.
///
/// Windows are labeled with the same segmentation rule as training
/// (sub-threshold partial overlaps discarded); scores and metrics come
/// from the shared evaluation path, so they agree with training-time
/// validation exactly.
pub fn evaluate_recordings(
    ckpt: &Checkpoint,
    clips: &[AudioClip],
    records: &[AnnotationRecord],
    threshold: f64,
) -> Result<RecordingEval> {
    let snapshot = &ckpt.preprocess;
    let mut prepared: BTreeMap<String, AudioClip> = BTreeMap::new();
    let mut durations: BTreeMap<String, f64> = BTreeMap::new();
    let mut skipped = 0usize;
    for clip in clips {
        let name = clip.source_path.clone();
        if !records.iter().any(|r| r.filename == name) {
            skipped += 1;
            continue;
        }
        let clip = resample(clip, snapshot.sample_rate)?;
        let clip = mixdown(&clip, snapshot.mixdown.policy())?;
        durations.insert(name.clone(), clip.duration_s());
        prepared.insert(name, clip);
    }
    if prepared.is_empty() {
        return Err(Error::Inference(
            "no overlap between the supplied clips and the annotations".into(),
        ));
    }
    let relevant: Vec<AnnotationRecord> = records
        .iter()
        .filter(|r| prepared.contains_key(&r.filename))
        .cloned()
        .collect();

    let spec = DatasetSpec {
        segment_len_s: snapshot.segment_len_s,
        mode: snapshot.dataset_mode,
        overlap_threshold: snapshot.overlap_threshold,
        classes: ckpt.class_names.clone(),
        seed: 0,
    };
    let segments = segment_dataset(&relevant, &durations, &spec)?;
    let eval = evaluate_segments(
        &ckpt.model,
        &prepared,
        &segments,
        &snapshot.pipeline,
        snapshot.segment_samples(),
        64,
        threshold,
    )?;
    Ok(RecordingEval {
        metrics: eval.metrics,
        skipped_files: skipped,
        windows: segments.len(),
        labels: eval.labels,
        scores: eval.scores,
    })
}

/// Writes the inspection bundle for one recording: `spectrogram.csv`
/// (freq×time grid, one row per bin), `probability.csv` (window midpoint,
/// positive score), and `decision.csv` (window midpoint, 0/1 at the
/// threshold).
pub fn export_visualization(
    rows: &[PredictionRow],
    grid: &TimeFreqGrid,
    threshold: f64,
    dir: &Path,
) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Inference("no prediction rows to visualize".into()));
    }
    let rows_span = rows.last().unwrap().end_s - rows[0].begin_s;
    let grid_span = grid.frames as f64 * grid.frame_hop_s;
    let window = rows[0].end_s - rows[0].begin_s;
    if (rows_span - grid_span).abs() > window {
        return Err(Error::Inference(format!(
            "prediction span {rows_span:.3}s vs spectrogram span {grid_span:.3}s differ by more than one window"
        )));
    }

    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(body.as_bytes()).map_err(|e| Error::io(&path, e))
    };

    let mut spec = String::new();
    for b in 0..grid.bins {
        let row: Vec<String> = grid.row(b).iter().map(|v| format!("{v:.6}")).collect();
        spec.push_str(&row.join(","));
        spec.push('\n');
    }
    write("spectrogram.csv", spec)?;

    let mut prob = String::new();
    let mut decision = String::new();
    for row in rows {
        let mid = (row.begin_s + row.end_s) / 2.0;
        prob.push_str(&format!("{mid:.6},{:.6}\n", row.positive_score()));
        decision
            .push_str(&format!("{mid:.6},{}\n", u8::from(row.positive_score() >= threshold)));
    }
    write("probability.csv", prob)?;
    write("decision.csv", decision)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(begin: f64, p_call: f64) -> PredictionRow {
        PredictionRow {
            filename: "f.wav".into(),
            channel: 1,
            begin_s: begin,
            end_s: begin + 1.0,
            probabilities: vec![1.0 - p_call, p_call],
            predicted_label: if p_call >= 0.5 { "call".into() } else { "background".into() },
            padded: false,
        }
    }

    #[test]
    fn detect_merges_runs() {
        let rows = vec![row(0.0, 0.2), row(1.0, 0.8), row(2.0, 0.9), row(3.0, 0.3)];
        let events = detect(&rows, 0.5, 1);
        assert_eq!(events.len(), 1);
        let e = &events[0];
        assert_eq!(e.begin_s, 1.0);
        assert_eq!(e.end_s, 3.0);
        assert!((e.peak_probability - 0.9).abs() < 1e-9);
        assert_eq!(e.label, "call");
    }

    #[test]
    fn detect_below_threshold_is_empty() {
        let rows = vec![row(0.0, 0.2), row(1.0, 0.3)];
        assert!(detect(&rows, 0.5, 1).is_empty());
    }

    #[test]
    fn detect_min_run_filters_singletons() {
        let rows = vec![row(0.0, 0.9), row(1.0, 0.1), row(2.0, 0.8), row(3.0, 0.85)];
        let events = detect(&rows, 0.5, 2);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].begin_s, 2.0);
    }

    #[test]
    fn detect_is_monotone_in_threshold() {
        let probs = [0.1, 0.6, 0.7, 0.2, 0.9, 0.95, 0.4, 0.55];
        let rows: Vec<PredictionRow> =
            probs.iter().enumerate().map(|(i, &p)| row(i as f64, p)).collect();
        let total = |t: f64| -> f64 {
            detect(&rows, t, 1).iter().map(|e| e.end_s - e.begin_s).sum()
        };
        let mut prev = total(0.0);
        for t in [0.2, 0.4, 0.6, 0.8, 1.0] {
            let cur = total(t);
            assert!(cur <= prev + 1e-12, "threshold {t}: {cur} > {prev}");
            prev = cur;
        }
    }

    #[test]
    fn detect_does_not_merge_across_files() {
        let mut a = row(0.0, 0.9);
        let mut b = row(1.0, 0.9);
        a.filename = "a.wav".into();
        b.filename = "b.wav".into();
        let events = detect(&[a, b], 0.5, 1);
        assert_eq!(events.len(), 2);
    }

    #[test]
    fn raven_export_formats_exactly() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("sel.txt");
        let event = DetectionEvent {
            filename: "f.wav".into(),
            channel: 1,
            begin_s: 1.0,
            end_s: 3.0,
            peak_probability: 0.9,
            label: "call".into(),
        };
        export_raven(&[event], &path, (0.0, 10000.0)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "Selection\tView\tChannel\tBegin Time (s)\tEnd Time (s)\tLow Freq (Hz)\tHigh Freq (Hz)\tAnnotation"
        );
        assert_eq!(
            lines.next().unwrap(),
            "1\tSpectrogram 1\t1\t1.000000\t3.000000\t0.000000\t10000.000000\tcall"
        );
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn raven_export_empty_is_header_only() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("sel.txt");
        export_raven(&[], &path, (0.0, 4000.0)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn raven_round_trip_is_lossless() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("sel.txt");
        let events = vec![
            DetectionEvent {
                filename: "f.wav".into(),
                channel: 1,
                begin_s: 1.25,
                end_s: 3.5,
                peak_probability: 0.9,
                label: "call".into(),
            },
            DetectionEvent {
                filename: "f.wav".into(),
                channel: 1,
                begin_s: 7.0,
                end_s: 8.0,
                peak_probability: 0.8,
                label: "call".into(),
            },
        ];
        export_raven(&events, &path, (100.0, 2000.0)).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();

        let records = crate::annotations::load_annotations(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].begin_s, 1.25);
        assert_eq!(records[0].end_s, 3.5);
        assert_eq!(records[0].low_hz, Some(100.0));

        // Re-export from the parsed records: byte-identical.
        let events2: Vec<DetectionEvent> = records
            .iter()
            .map(|r| DetectionEvent {
                filename: r.filename.clone(),
                channel: r.channel,
                begin_s: r.begin_s,
                end_s: r.end_s,
                peak_probability: 0.0,
                label: r.label.clone(),
            })
            .collect();
        let path2 = dir.path().join("sel2.txt");
        export_raven(&events2, &path2, (records[0].low_hz.unwrap(), records[0].high_hz.unwrap()))
            .unwrap();
        assert_eq!(bytes1, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn predictions_csv_round_trip() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("pred.csv");
        let classes = vec!["background".to_string(), "call".to_string()];
        let rows = vec![row(0.0, 0.25), row(1.0, 0.875)];
        write_predictions_csv(&rows, &classes, &path).unwrap();
        let (back, classes_back) = read_predictions_csv(&path).unwrap();
        assert_eq!(classes_back, classes);
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&rows) {
            assert_eq!(a.filename, b.filename);
            assert!((a.begin_s - b.begin_s).abs() < 1e-6);
            for (x, y) in a.probabilities.iter().zip(&b.probabilities) {
                assert!((x - y).abs() < 1e-6);
            }
            assert_eq!(a.predicted_label, b.predicted_label);
        }
    }

    #[test]
    fn predictions_csv_empty_is_header_only() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("pred.csv");
        let classes = vec!["background".to_string(), "call".to_string()];
        write_predictions_csv(&[], &classes, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "filename,channel,begin_time,end_time,background,call,predicted_label\n");
        let (rows, _) = read_predictions_csv(&path).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn visualization_bundle_round_trips() {
        let dir = tempfile::TempDir::new().unwrap();
        let rows = vec![row(0.0, 0.3), row(1.0, 0.7), row(2.0, 0.9)];
        let grid = TimeFreqGrid {
            values: (0..4 * 30).map(|i| i as f32 / 10.0).collect(),
            bins: 4,
            frames: 30,
            bin_hz: crate::dsp::BinAxis::Linear { hz_per_bin: 100.0 },
            frame_hop_s: 0.1,
            scale: crate::dsp::GridScale::Db,
        };
        export_visualization(&rows, &grid, 0.5, dir.path()).unwrap();

        let prob = std::fs::read_to_string(dir.path().join("probability.csv")).unwrap();
        assert_eq!(prob.lines().count(), 3);
        let first: Vec<f64> =
            prob.lines().next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert!((first[0] - 0.5).abs() < 1e-6);
        assert!((first[1] - 0.3).abs() < 1e-6);

        let decision = std::fs::read_to_string(dir.path().join("decision.csv")).unwrap();
        let flags: Vec<&str> =
            decision.lines().map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(flags, vec!["0", "1", "1"]);

        let spec = std::fs::read_to_string(dir.path().join("spectrogram.csv")).unwrap();
        assert_eq!(spec.lines().count(), 4);
        let v: f64 = spec.lines().next().unwrap().split(',').next().unwrap().parse().unwrap();
        assert!((v - 0.0).abs() < 1e-6);
    }

    #[test]
    fn visualization_span_mismatch_errors() {
        let dir = tempfile::TempDir::new().unwrap();
        let rows = vec![row(0.0, 0.3)];
        let grid = TimeFreqGrid {
            values: vec![0.0; 4 * 100],
            bins: 4,
            frames: 100,
            bin_hz: crate::dsp::BinAxis::Linear { hz_per_bin: 100.0 },
            frame_hop_s: 0.1, // 10 s of grid vs 1 s of rows
            scale: crate::dsp::GridScale::Db,
        };
        assert!(export_visualization(&rows, &grid, 0.5, dir.path()).is_err());
    }
}
