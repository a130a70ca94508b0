//! Annotation ingestion and dataset assembly.
//!
//! Annotations arrive either as comma-separated files with the header
//! `filename,channel,begin_time,end_time,low_freq,high_freq,label`
//! (channel and the frequency bounds are optional) or as tab-separated
//! Raven selection tables; the two are told apart by their header names.
//!
//! Recordings are cut into fixed-length windows starting at zero with hop
//! equal to the window length. A window overlapping an annotation by at
//! least `overlap_threshold × segment_len` takes that annotation's class
//! (largest overlap wins, then earliest begin time); windows with zero
//! overlap become background in with-background mode; windows with some
//! but sub-threshold overlap are discarded so half-covered calls never
//! pollute the background class.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// One annotated interval of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub filename: String,
    /// 1-based channel number, as used by selection tables.
    pub channel: u32,
    pub begin_s: f64,
    pub end_s: f64,
    pub low_hz: Option<f64>,
    pub high_hz: Option<f64>,
    pub label: String,
}

impl AnnotationRecord {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.begin_s
    }
}

/// A fixed-length labeled window, the unit of training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSegment {
    pub filename: String,
    pub channel: u32,
    pub begin_s: f64,
    pub end_s: f64,
    pub class_index: usize,
}

/// Whether gaps between calls become background windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    /// Windows with zero annotation overlap are labeled class 0.
    WithBackground,
    /// Only call-labeled windows are emitted.
    NoBackground,
}

/// Segmentation parameters.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub segment_len_s: f64,
    pub mode: DatasetMode,
    /// Fraction of the segment length an annotation must cover.
    pub overlap_threshold: f64,
    /// Class names by index. In with-background mode index 0 is the
    /// background class.
    pub classes: Vec<String>,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.segment_len_s <= 0.0 {
            return Err(Error::InvalidArgument("segment_len_s must be positive".into()));
        }
        if !(0.0 < self.overlap_threshold && self.overlap_threshold <= 1.0) {
            return Err(Error::InvalidArgument("overlap_threshold must be in (0, 1]".into()));
        }
        let mut seen = self.classes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(Error::InvalidArgument("class names must be unique".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument("class list must not be empty".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Raven selection-table header, byte-exact as exported.
pub const RAVEN_HEADER: [&str; 8] = [
    "Selection",
    "View",
    "Channel",
    "Begin Time (s)",
    "End Time (s)",
    "Low Freq (Hz)",
    "High Freq (Hz)",
    "Annotation",
];

/// Loads an annotation file, auto-detecting CSV vs Raven TSV by header.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first_line = text.lines().next().unwrap_or("");
    if first_line.contains('\t') && first_line.contains("Begin Time (s)") {
        parse_raven(&text, path)
    } else {
        parse_csv(&text)
    }
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

fn schema_error(missing: &str, headers: &csv::StringRecord) -> Error {
    let present: Vec<&str> = headers.iter().collect();
    Error::Annotation(format!(
        "missing required column `{missing}` (present columns: {})",
        present.join(", ")
    ))
}

fn parse_time(field: &str, column: &str, line: u64) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::Annotation(format!("line {line}: cannot parse {column} `{field}`"))
    })
}

fn parse_opt_hz(field: Option<&str>) -> Option<f64> {
    field.and_then(|f| f.trim().parse::<f64>().ok())
}

fn validate_interval(record: &AnnotationRecord, line: u64) -> Result<()> {
    if record.begin_s.is_nan() || record.begin_s < 0.0 {
        return Err(Error::Annotation(format!("line {line}: begin time must be >= 0")));
    }
    if record.begin_s >= record.end_s {
        return Err(Error::Annotation(format!(
            "line {line}: begin {} must precede end {}",
            record.begin_s, record.end_s
        )));
    }
    if record.label.is_empty() {
        return Err(Error::Annotation(format!("line {line}: empty label")));
    }
    Ok(())
}

fn parse_csv(text: &str) -> Result<Vec<AnnotationRecord>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Annotation(format!("cannot read header: {e}")))?
        .clone();
    let required = ["filename", "begin_time", "end_time", "label"];
    for name in required {
        if header_index(&headers, name).is_none() {
            return Err(schema_error(name, &headers));
        }
    }
    let filename_i = header_index(&headers, "filename").unwrap();
    let begin_i = header_index(&headers, "begin_time").unwrap();
    let end_i = header_index(&headers, "end_time").unwrap();
    let label_i = header_index(&headers, "label").unwrap();
    let channel_i = header_index(&headers, "channel");
    let low_i = header_index(&headers, "low_freq");
    let high_i = header_index(&headers, "high_freq");

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Annotation(format!("malformed row: {e}")))?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("").trim().to_string();
        let channel = match channel_i {
            Some(i) => field(i).parse::<u32>().map_err(|_| {
                Error::Annotation(format!("line {line}: bad channel `{}`", field(i)))
            })?,
            None => 1,
        };
        let record = AnnotationRecord {
            filename: field(filename_i),
            channel,
            begin_s: parse_time(&field(begin_i), "begin_time", line)?,
            end_s: parse_time(&field(end_i), "end_time", line)?,
            low_hz: parse_opt_hz(low_i.and_then(|i| row.get(i))),
            high_hz: parse_opt_hz(high_i.and_then(|i| row.get(i))),
            label: field(label_i),
        };
        validate_interval(&record, line)?;
        records.push(record);
    }
    Ok(records)
}

fn parse_raven(text: &str, path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Annotation(format!("cannot read header: {e}")))?
        .clone();
    for name in ["Begin Time (s)", "End Time (s)", "Annotation"] {
        if header_index(&headers, name).is_none() {
            return Err(schema_error(name, &headers));
        }
    }
    let begin_i = header_index(&headers, "Begin Time (s)").unwrap();
    let end_i = header_index(&headers, "End Time (s)").unwrap();
    let label_i = header_index(&headers, "Annotation").unwrap();
    let channel_i = header_index(&headers, "Channel");
    let low_i = header_index(&headers, "Low Freq (Hz)");
    let high_i = header_index(&headers, "High Freq (Hz)");
    let file_i = header_index(&headers, "Begin File");

    // Selection tables usually carry no filename; fall back to the table's
    // own stem so downstream grouping still works.
    let fallback = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Annotation(format!("malformed row: {e}")))?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("").trim().to_string();
        let filename = match file_i {
            Some(i) if !field(i).is_empty() => field(i),
            _ => fallback.clone(),
        };
        let channel = match channel_i {
            Some(i) => field(i).parse::<u32>().unwrap_or(1),
            None => 1,
        };
        let record = AnnotationRecord {
            filename,
            channel,
            begin_s: parse_time(&field(begin_i), "Begin Time (s)", line)?,
            end_s: parse_time(&field(end_i), "End Time (s)", line)?,
            low_hz: parse_opt_hz(low_i.and_then(|i| row.get(i))),
            high_hz: parse_opt_hz(high_i.and_then(|i| row.get(i))),
            label: field(label_i),
        };
        validate_interval(&record, line)?;
        records.push(record);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

/// Record-level filter rules; inactive fields are skipped.
#[derive(Debug, Clone, Default)]
pub struct FilterRules {
    /// Drop records whose filename appears here.
    pub exclude_files: Vec<String>,
    /// Drop records whose duration equals this value within ±1e-3 s.
    pub drop_duration_equals: Option<f64>,
    /// When non-empty, keep only records with one of these labels.
    pub keep_labels: Vec<String>,
}

/// Applies the rules, preserving record order.
pub fn filter_annotations(records: &[AnnotationRecord], rules: &FilterRules) -> Vec<AnnotationRecord> {
    records
        .iter()
        .filter(|r| {
            if rules.exclude_files.iter().any(|f| f == &r.filename) {
                return false;
            }
            if let Some(target) = rules.drop_duration_equals {
                // Strictly inside ±1e-3; the guard keeps a difference of
                // exactly one millisecond outside despite f64 rounding.
                if (r.duration_s() - target).abs() < 1e-3 - 1e-9 {
                    return false;
                }
            }
            if !rules.keep_labels.is_empty() && !rules.keep_labels.iter().any(|l| l == &r.label) {
                return false;
            }
            true
        })
        .cloned()
        .collect()
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

/// Tiles every file into fixed windows and labels them against the records.
///
/// Files appear in `file_durations` order (sorted by name); a file with no
/// records yields all-background windows on channel 1 in with-background
/// mode. Records must reference known files, and record labels must appear
/// in the class list.
pub fn segment_dataset(
    records: &[AnnotationRecord],
    file_durations: &BTreeMap<String, f64>,
    spec: &DatasetSpec,
) -> Result<Vec<LabeledSegment>> {
    spec.validate()?;
    for r in records {
        if !file_durations.contains_key(&r.filename) {
            return Err(Error::Annotation(format!("unknown filename `{}`", r.filename)));
        }
        if !spec.classes.iter().any(|c| c == &r.label) {
            return Err(Error::Annotation(format!(
                "label `{}` is not in the class list [{}]",
                r.label,
                spec.classes.join(", ")
            )));
        }
    }

    let seg = spec.segment_len_s;
    let mut out = Vec::new();
    for (filename, &duration) in file_durations {
        let file_records: Vec<&AnnotationRecord> =
            records.iter().filter(|r| &r.filename == filename).collect();
        let mut channels: Vec<u32> = file_records.iter().map(|r| r.channel).collect();
        channels.sort_unstable();
        channels.dedup();
        if channels.is_empty() {
            channels.push(1);
        }
        let windows = ((duration / seg) + 1e-9).floor() as usize;
        for &channel in &channels {
            for w in 0..windows {
                let begin = w as f64 * seg;
                let end = begin + seg;
                let mut best: Option<(f64, f64, usize)> = None; // (overlap, ann begin, class)
                let mut total_overlap = 0.0;
                for r in file_records.iter().filter(|r| r.channel == channel) {
                    let ov = (end.min(r.end_s) - begin.max(r.begin_s)).max(0.0);
                    if ov <= 0.0 {
                        continue;
                    }
                    total_overlap += ov;
                    if ov + 1e-12 < spec.overlap_threshold * seg {
                        continue;
                    }
                    let class = spec.classes.iter().position(|c| c == &r.label).unwrap();
                    let candidate = (ov, r.begin_s, class);
                    best = Some(match best {
                        None => candidate,
                        Some(current) => {
                            // Largest overlap wins; ties go to the earliest
                            // annotation begin time.
                            if candidate.0 > current.0 + 1e-12
                                || ((candidate.0 - current.0).abs() <= 1e-12
                                    && candidate.1 < current.1)
                            {
                                candidate
                            } else {
                                current
                            }
                        }
                    });
                }
                let class_index = match best {
                    Some((_, _, class)) => Some(class),
                    None if total_overlap == 0.0 => match spec.mode {
                        DatasetMode::WithBackground => Some(0),
                        DatasetMode::NoBackground => None,
                    },
                    None => None, // partial sub-threshold overlap: discard
                };
                if let Some(class_index) = class_index {
                    out.push(LabeledSegment {
                        filename: filename.clone(),
                        channel,
                        begin_s: begin,
                        end_s: end,
                        class_index,
                    });
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// How segments are grouped before splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    /// One group per recording file.
    Filename,
    /// One group per leading `YYYYMMDD` or `DD.MM.YY` date token; filenames
    /// without one fall back to their own group.
    DatePrefix,
}

/// Extracts the grouping key for a filename.
pub fn group_key_of(filename: &str, key: GroupKey) -> String {
    match key {
        GroupKey::Filename => filename.to_string(),
        GroupKey::DatePrefix => {
            let b = filename.as_bytes();
            let all_digits = |s: &[u8]| s.iter().all(u8::is_ascii_digit);
            if b.len() >= 8 && all_digits(&b[..8]) {
                return filename[..8].to_string();
            }
            if b.len() >= 8
                && all_digits(&b[..2])
                && b[2] == b'.'
                && all_digits(&b[3..5])
                && b[5] == b'.'
                && all_digits(&b[6..8])
            {
                return filename[..8].to_string();
            }
            filename.to_string()
        }
    }
}

/// Splits segments into train and validation sets by group, never placing
/// one group in both splits.
///
/// Groups are shuffled with the seeded RNG; the first
/// `round(n_groups × train_ratio)` (clamped so both sides are non-empty)
/// become the train split.
pub fn split_by_group(
    segments: &[LabeledSegment],
    key: GroupKey,
    ratios: (f64, f64),
    seed: u64,
) -> Result<(Vec<LabeledSegment>, Vec<LabeledSegment>)> {
    let (train_ratio, val_ratio) = ratios;
    if !(train_ratio > 0.0 && val_ratio > 0.0) {
        return Err(Error::InvalidArgument("split ratios must be positive".into()));
    }
    if (train_ratio + val_ratio - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("split ratios must sum to 1".into()));
    }
    let mut groups: Vec<String> =
        segments.iter().map(|s| group_key_of(&s.filename, key)).collect();
    groups.sort();
    groups.dedup();
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} group(s); need at least 2",
            groups.len()
        )));
    }

    let mut rng = rng::derive(seed, Stream::Split);
    // Fisher-Yates over the sorted group list.
    for i in (1..groups.len()).rev() {
        let j = rng.gen_range(0..=i);
        groups.swap(i, j);
    }
    let n_train = ((groups.len() as f64 * train_ratio).round() as usize)
        .clamp(1, groups.len() - 1);
    let train_groups = &groups[..n_train];

    let mut train = Vec::new();
    let mut val = Vec::new();
    for seg in segments {
        let g = group_key_of(&seg.filename, key);
        if train_groups.contains(&g) {
            train.push(seg.clone());
        } else {
            val.push(seg.clone());
        }
    }
    Ok((train, val))
}

// ---------------------------------------------------------------------------
// Balanced sampling
// ---------------------------------------------------------------------------

/// An infinite deterministic stream of segment indices that equalizes class
/// frequencies: each draw picks a class uniformly, then a segment uniformly
/// within that class, with replacement.
#[derive(Debug)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

/// Builds a sampler over `segments`; every declared class must own at least
/// one segment.
pub fn balanced_sampler(
    segments: &[LabeledSegment],
    classes: &[String],
    seed: u64,
) -> Result<BalancedSampler> {
    let mut by_class = vec![Vec::new(); classes.len()];
    for (i, seg) in segments.iter().enumerate() {
        if seg.class_index >= classes.len() {
            return Err(Error::InvalidArgument(format!(
                "segment class index {} out of range",
                seg.class_index
            )));
        }
        by_class[seg.class_index].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Annotation(format!("class `{}` has no segments", classes[c])));
        }
    }
    Ok(BalancedSampler { by_class, rng: rng::derive(seed, Stream::Sampler) })
}

impl Iterator for BalancedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let class = self.rng.gen_range(0..self.by_class.len());
        let members = &self.by_class[class];
        Some(members[self.rng.gen_range(0..members.len())])
    }
}
