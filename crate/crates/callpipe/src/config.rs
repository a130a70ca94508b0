//! Hierarchical experiment configuration.
//!
//! An experiment is described by six named groups (`data`, `augmentations`,
//! `preprocessors`, `model`, `optim`, `experiment`), each living in its own
//! file under a config root:
//!
//! ```text
//! conf/
//!   data/defaults.yaml
//!   augmentations/defaults.yaml
//!   preprocessors/defaults.yaml   (plus variants: unit.yaml, sliding_window.yaml, ...)
//!   model/defaults.yaml
//!   optim/defaults.yaml
//!   experiment/defaults.yaml
//!   runs/default.yaml             (names one file per group)
//! ```
//!
//! A run file selects one file per group; command-line overrides then swap
//! whole groups (`optim=sgd_fast`) or set single leaves
//! (`data.batch_size=8`). [`load_config`] merges everything into a single
//! [`ResolvedConfig`] snapshot.
//!
//! Config files use a YAML subset: nested mappings, sequences, and scalars.
//! No anchors, tags, flow collections (other than the empty `{}`/`[]`), or
//! multi-line strings. Scalars coerce in a fixed order — int, then float,
//! then bool (`true`/`false`), else string — and quoted values are always
//! strings. Serializing a tree and reparsing it yields an equal tree, and
//! re-serializing is byte-identical.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// The six top-level configuration groups, in canonical order.
pub const GROUPS: [&str; 6] = [
    "data",
    "augmentations",
    "preprocessors",
    "model",
    "optim",
    "experiment",
];

/// A configuration tree node: scalar, sequence, or mapping.
///
/// Mappings preserve insertion order, which also fixes serialization order.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    List(Vec<Value>),
    Map(Vec<(String, Value)>),
}

impl Value {
    pub fn empty_map() -> Value {
        Value::Map(Vec::new())
    }

    pub fn is_scalar(&self) -> bool {
        !matches!(self, Value::List(_) | Value::Map(_))
    }

    /// Looks up a direct child of a mapping by key.
    pub fn get(&self, key: &str) -> Option<&Value> {
        match self {
            Value::Map(entries) => entries.iter().find(|(k, _)| k == key).map(|(_, v)| v),
            _ => None,
        }
    }

    fn get_mut(&mut self, key: &str) -> Option<&mut Value> {
        match self {
            Value::Map(entries) => entries
                .iter_mut()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v),
            _ => None,
        }
    }

    /// Follows a dotted path of mapping keys.
    pub fn get_path(&self, path: &[String]) -> Option<&Value> {
        let mut node = self;
        for key in path {
            node = node.get(key)?;
        }
        Some(node)
    }

    pub fn as_i64(&self) -> Option<i64> {
        match *self {
            Value::Int(v) => Some(v),
            _ => None,
        }
    }

    /// Numeric accessor: accepts an int leaf where a float is expected.
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Float(v) => Some(v),
            Value::Int(v) => Some(v as f64),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match *self {
            Value::Bool(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(items) => Some(items),
            _ => None,
        }
    }

    /// Parses a config document. The top level must be a mapping
    /// (an empty document parses as an empty mapping).
    pub fn parse_str(text: &str) -> Result<Value> {
        let mut lines = tokenize(text)?;
        if lines.is_empty() {
            return Ok(Value::empty_map());
        }
        if lines.len() == 1 && lines[0].text == "{}" {
            return Ok(Value::empty_map());
        }
        let col = lines[0].col;
        let mut pos = 0;
        let value = parse_node(&mut lines, &mut pos, col)?;
        if pos != lines.len() {
            return Err(Error::Config(format!(
                "line {}: unexpected indentation",
                lines[pos].number
            )));
        }
        match value {
            Value::Map(_) => Ok(value),
            _ => Err(Error::Config("top level must be a mapping".into())),
        }
    }

    /// Serializes the tree in canonical form (2-space indents, insertion
    /// order). `parse_str(emit(t)) == t` and re-emitting is byte-identical.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        match self {
            Value::Map(entries) if entries.is_empty() => out.push_str("{}\n"),
            Value::Map(_) => emit_block(self, 0, &mut out),
            _ => {
                emit_block(self, 0, &mut out);
            }
        }
        out
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::List(_) | Value::Map(_) => f.write_str(self.emit().trim_end()),
            scalar => f.write_str(&format_scalar(scalar)),
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct Line {
    col: usize,
    text: String,
    number: usize,
}

/// Splits the document into significant lines with column positions,
/// stripping comments. A `#` starts a comment only at the beginning of the
/// content or after whitespace, and never inside a quoted string.
fn tokenize(text: &str) -> Result<Vec<Line>> {
    let mut lines = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let number = idx + 1;
        let col = raw.len() - raw.trim_start_matches(' ').len();
        let rest = &raw[col..];
        if rest.starts_with('\t') {
            return Err(Error::Config(format!(
                "line {number}: tabs are not allowed in indentation"
            )));
        }
        let content = strip_comment(rest).trim_end();
        if content.is_empty() {
            continue;
        }
        lines.push(Line { col, text: content.to_string(), number });
    }
    Ok(lines)
}

fn strip_comment(s: &str) -> &str {
    let mut quote: Option<char> = None;
    let mut prev_is_space = true;
    for (i, c) in s.char_indices() {
        match quote {
            Some(q) => {
                if c == q {
                    quote = None;
                }
            }
            None => match c {
                '"' | '\'' => quote = Some(c),
                '#' if prev_is_space => return &s[..i],
                _ => {}
            },
        }
        prev_is_space = c == ' ' || c == '\t';
    }
    s
}

/// Parses the block starting at `pos`, whose lines sit at column `col`.
fn parse_node(lines: &mut Vec<Line>, pos: &mut usize, col: usize) -> Result<Value> {
    if lines[*pos].text.starts_with('-')
        && (lines[*pos].text == "-" || lines[*pos].text.starts_with("- "))
    {
        parse_sequence(lines, pos, col)
    } else {
        parse_mapping(lines, pos, col)
    }
}

fn parse_sequence(lines: &mut Vec<Line>, pos: &mut usize, col: usize) -> Result<Value> {
    let mut items = Vec::new();
    while *pos < lines.len() && lines[*pos].col == col {
        let line = &lines[*pos];
        if !(line.text == "-" || line.text.starts_with("- ")) {
            break;
        }
        let number = line.number;
        let rest = line.text[1..].trim_start();
        if rest.is_empty() {
            // Item body on the following, deeper lines.
            *pos += 1;
            if *pos >= lines.len() || lines[*pos].col <= col {
                return Err(Error::Config(format!("line {number}: empty sequence item")));
            }
            let child_col = lines[*pos].col;
            items.push(parse_node(lines, pos, child_col)?);
        } else {
            // Rewrite the item body as a line at its own column and reparse;
            // continuation lines of a map item align under that column.
            let rest_col = col + (line.text.len() - rest.len());
            if is_scalar_item(rest) {
                items.push(parse_scalar(rest, number)?);
                *pos += 1;
            } else {
                lines[*pos] = Line { col: rest_col, text: rest.to_string(), number };
                items.push(parse_node(lines, pos, rest_col)?);
            }
        }
    }
    Ok(Value::List(items))
}

/// A sequence item body is a scalar unless it looks like `key: ...`,
/// a nested dash, or an opening of another structure.
fn is_scalar_item(rest: &str) -> bool {
    if rest == "-" || rest.starts_with("- ") {
        return false;
    }
    split_key_value(rest).is_none()
}

fn parse_mapping(lines: &mut Vec<Line>, pos: &mut usize, col: usize) -> Result<Value> {
    let mut entries: Vec<(String, Value)> = Vec::new();
    while *pos < lines.len() && lines[*pos].col == col {
        let line = &lines[*pos];
        if line.text == "-" || line.text.starts_with("- ") {
            break;
        }
        let number = line.number;
        let (key, rest) = split_key_value(&line.text).ok_or_else(|| {
            Error::Config(format!("line {number}: expected `key: value`"))
        })?;
        if key.is_empty() {
            return Err(Error::Config(format!("line {number}: empty key")));
        }
        if entries.iter().any(|(k, _)| k == &key) {
            return Err(Error::Config(format!("line {number}: duplicate key `{key}`")));
        }
        if rest.is_empty() {
            *pos += 1;
            if *pos < lines.len() && lines[*pos].col > col {
                let child_col = lines[*pos].col;
                entries.push((key, parse_node(lines, pos, child_col)?));
            } else if *pos < lines.len()
                && lines[*pos].col == col
                && (lines[*pos].text == "-" || lines[*pos].text.starts_with("- "))
            {
                // Sequence items may sit at the same column as their key.
                entries.push((key, parse_sequence(lines, pos, col)?));
            } else {
                return Err(Error::Config(format!(
                    "line {number}: key `{key}` has no value"
                )));
            }
        } else {
            entries.push((key, parse_scalar(&rest, number)?));
            *pos += 1;
        }
    }
    Ok(Value::Map(entries))
}

/// Splits `key: value` at the first unquoted `: ` (or trailing `:`).
/// Returns `None` when the line is a plain scalar.
fn split_key_value(text: &str) -> Option<(String, String)> {
    if text.starts_with('"') || text.starts_with('\'') {
        return None;
    }
    let bytes = text.as_bytes();
    for i in 0..bytes.len() {
        if bytes[i] == b':' && (i + 1 == bytes.len() || bytes[i + 1] == b' ') {
            let key = text[..i].trim().to_string();
            let rest = if i + 1 == bytes.len() { "" } else { text[i + 1..].trim() };
            return Some((key, rest.to_string()));
        }
    }
    None
}

fn parse_scalar(text: &str, line: usize) -> Result<Value> {
    let s = text.trim();
    if s == "{}" {
        return Ok(Value::empty_map());
    }
    if s == "[]" {
        return Ok(Value::List(Vec::new()));
    }
    if let Some(body) = s.strip_prefix('"') {
        let inner = body.strip_suffix('"').ok_or_else(|| {
            Error::Config(format!("line {line}: unterminated double-quoted string"))
        })?;
        return Ok(Value::Str(unescape(inner, line)?));
    }
    if let Some(body) = s.strip_prefix('\'') {
        let inner = body.strip_suffix('\'').ok_or_else(|| {
            Error::Config(format!("line {line}: unterminated single-quoted string"))
        })?;
        return Ok(Value::Str(inner.to_string()));
    }
    Ok(coerce_scalar(s))
}

/// Plain-scalar coercion order: int, float, bool, string.
pub(crate) fn coerce_scalar(s: &str) -> Value {
    if let Ok(v) = s.parse::<i64>() {
        return Value::Int(v);
    }
    if looks_numeric(s) {
        if let Ok(v) = s.parse::<f64>() {
            return Value::Float(v);
        }
    }
    match s {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::Str(s.to_string()),
    }
}

/// Guards the float branch against `inf`/`nan` spellings that
/// `f64::from_str` would accept.
fn looks_numeric(s: &str) -> bool {
    !s.is_empty()
        && s.bytes().any(|b| b.is_ascii_digit())
        && s.bytes()
            .all(|b| b.is_ascii_digit() || matches!(b, b'+' | b'-' | b'.' | b'e' | b'E'))
}

fn unescape(s: &str, line: usize) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('"') => out.push('"'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            other => {
                return Err(Error::Config(format!(
                    "line {line}: unsupported escape `\\{}`",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

fn pad(col: usize, out: &mut String) {
    for _ in 0..col {
        out.push(' ');
    }
}

fn emit_block(value: &Value, col: usize, out: &mut String) {
    match value {
        Value::Map(entries) => {
            for (key, child) in entries {
                pad(col, out);
                out.push_str(key);
                out.push(':');
                emit_child(child, col, out);
            }
        }
        Value::List(items) => {
            for item in items {
                pad(col, out);
                out.push_str("- ");
                emit_item(item, col + 2, out);
            }
        }
        scalar => {
            pad(col, out);
            out.push_str(&format_scalar(scalar));
            out.push('\n');
        }
    }
}

/// Emits a mapping value: scalars inline, containers on deeper lines.
fn emit_child(child: &Value, col: usize, out: &mut String) {
    match child {
        Value::Map(entries) if entries.is_empty() => out.push_str(" {}\n"),
        Value::List(items) if items.is_empty() => out.push_str(" []\n"),
        Value::Map(_) | Value::List(_) => {
            out.push('\n');
            emit_block(child, col + 2, out);
        }
        scalar => {
            out.push(' ');
            out.push_str(&format_scalar(scalar));
            out.push('\n');
        }
    }
}

/// Emits a sequence item whose body starts in-line after `- `;
/// continuation lines align under the body column.
fn emit_item(item: &Value, body_col: usize, out: &mut String) {
    match item {
        Value::Map(entries) if entries.is_empty() => out.push_str("{}\n"),
        Value::List(items) if items.is_empty() => out.push_str("[]\n"),
        Value::Map(entries) => {
            for (i, (key, child)) in entries.iter().enumerate() {
                if i > 0 {
                    pad(body_col, out);
                }
                out.push_str(key);
                out.push(':');
                emit_child(child, body_col, out);
            }
        }
        Value::List(items) => {
            for (i, inner) in items.iter().enumerate() {
                if i > 0 {
                    pad(body_col, out);
                }
                out.push_str("- ");
                emit_item(inner, body_col + 2, out);
            }
        }
        scalar => {
            out.push_str(&format_scalar(scalar));
            out.push('\n');
        }
    }
}

pub(crate) fn format_scalar(value: &Value) -> String {
    match value {
        Value::Int(v) => v.to_string(),
        Value::Float(v) => format_float(*v),
        Value::Bool(v) => v.to_string(),
        Value::Str(s) => format_string(s),
        Value::List(_) | Value::Map(_) => unreachable!("containers are not scalars"),
    }
}

/// Floats keep a `.` or exponent so they reparse as floats.
fn format_float(v: f64) -> String {
    let s = format!("{v}");
    if s.bytes().all(|b| b.is_ascii_digit() || b == b'-') {
        format!("{s}.0")
    } else {
        s
    }
}

/// Strings are emitted plain when the plain form reparses as the same
/// string, otherwise double-quoted.
fn format_string(s: &str) -> String {
    if plain_string_safe(s) {
        s.to_string()
    } else {
        let mut out = String::with_capacity(s.len() + 2);
        out.push('"');
        for c in s.chars() {
            match c {
                '\\' => out.push_str("\\\\"),
                '"' => out.push_str("\\\""),
                '\n' => out.push_str("\\n"),
                '\t' => out.push_str("\\t"),
                '\r' => out.push_str("\\r"),
                _ => out.push(c),
            }
        }
        out.push('"');
        out
    }
}

fn plain_string_safe(s: &str) -> bool {
    if s.is_empty() || s != s.trim() {
        return false;
    }
    if s.chars().any(|c| c.is_control()) {
        return false;
    }
    // Leading characters that would change the parse.
    let first = s.chars().next().unwrap();
    if matches!(first, '-' | '#' | '"' | '\'' | '&' | '*' | '!' | '|' | '>' | '%' | '@' | '[' | ']' | '{' | '}') {
        return false;
    }
    // `key: value` split or comment detection would mangle these.
    if split_key_value(s).is_some() || s.contains(" #") {
        return false;
    }
    // Must not coerce into another scalar type.
    matches!(coerce_scalar(s), Value::Str(_))
}

// ---------------------------------------------------------------------------
// Overrides
// ---------------------------------------------------------------------------

/// A single command-line override.
#[derive(Debug, Clone, PartialEq)]
pub enum Override {
    /// `group=name`: replace a whole group with another group file.
    GroupSwap { group: String, name: String },
    /// `a.b.c=value`: set one existing leaf.
    LeafSet { path: Vec<String>, value: Value },
}

/// Parses an override token.
///
/// A dotted left-hand side becomes a leaf-set whose value coerces in the
/// int → float → bool → string order (quoted values stay strings); an
/// undotted left-hand side names a group swap.
pub fn parse_override(token: &str) -> Result<Override> {
    let (lhs, rhs) = token.split_once('=').ok_or_else(|| Error::Override {
        path: token.to_string(),
        reason: "expected `path=value`".into(),
    })?;
    let lhs = lhs.trim();
    let err = |reason: &str| Error::Override { path: token.to_string(), reason: reason.into() };
    if lhs.is_empty() {
        return Err(err("empty path"));
    }
    if !lhs.contains('.') {
        return Ok(Override::GroupSwap { group: lhs.to_string(), name: rhs.trim().to_string() });
    }
    let path: Vec<String> = lhs.split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(err("empty path component"));
    }
    let value = parse_scalar(rhs.trim(), 0).map_err(|_| err("unparseable value"))?;
    if !value.is_scalar() {
        return Err(err("override values must be scalars"));
    }
    Ok(Override::LeafSet { path, value })
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

/// A fully-merged configuration snapshot containing all six groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    tree: Value,
}

impl ResolvedConfig {
    /// Wraps an already-assembled tree, checking the six-group contract.
    pub fn from_tree(tree: Value) -> Result<ResolvedConfig> {
        for group in GROUPS {
            match tree.get(group) {
                Some(Value::Map(_)) => {}
                Some(_) => {
                    return Err(Error::Config(format!("group `{group}` must be a mapping")))
                }
                None => return Err(Error::Config(format!("missing group `{group}`"))),
            }
        }
        Ok(ResolvedConfig { tree })
    }

    pub fn tree(&self) -> &Value {
        &self.tree
    }

    /// Serializes the snapshot (see [`Value::emit`]).
    pub fn emit(&self) -> String {
        self.tree.emit()
    }

    /// Parses a snapshot previously produced by [`ResolvedConfig::emit`].
    pub fn parse(text: &str) -> Result<ResolvedConfig> {
        ResolvedConfig::from_tree(Value::parse_str(text)?)
    }

    fn lookup(&self, path: &str) -> Result<&Value> {
        let parts: Vec<String> = path.split('.').map(str::to_string).collect();
        self.tree
            .get_path(&parts)
            .ok_or_else(|| Error::Config(format!("missing config key `{path}`")))
    }

    pub fn get_i64(&self, path: &str) -> Result<i64> {
        self.lookup(path)?
            .as_i64()
            .ok_or_else(|| Error::Config(format!("config key `{path}` is not an integer")))
    }

    pub fn get_usize(&self, path: &str) -> Result<usize> {
        let v = self.get_i64(path)?;
        usize::try_from(v)
            .map_err(|_| Error::Config(format!("config key `{path}` must be non-negative")))
    }

    pub fn get_f64(&self, path: &str) -> Result<f64> {
        self.lookup(path)?
            .as_f64()
            .ok_or_else(|| Error::Config(format!("config key `{path}` is not a number")))
    }

    pub fn get_bool(&self, path: &str) -> Result<bool> {
        self.lookup(path)?
            .as_bool()
            .ok_or_else(|| Error::Config(format!("config key `{path}` is not a bool")))
    }

    pub fn get_str(&self, path: &str) -> Result<&str> {
        self.lookup(path)?
            .as_str()
            .ok_or_else(|| Error::Config(format!("config key `{path}` is not a string")))
    }

    pub fn get_list(&self, path: &str) -> Result<&[Value]> {
        self.lookup(path)?
            .as_list()
            .ok_or_else(|| Error::Config(format!("config key `{path}` is not a list")))
    }

    /// Returns the group subtree (a mapping) for one of the six groups.
    pub fn group(&self, name: &str) -> Result<&Value> {
        self.lookup(name)
    }
}

/// Loads and resolves a run configuration.
///
/// `run_name` may be a bare name (looked up under `<root>/runs/`) or a
/// root-relative path such as `runs/default`; the `.yaml` extension is
/// implied. Overrides apply left-to-right, later ones winning.
pub fn load_config(root_dir: &Path, run_name: &str, overrides: &[String]) -> Result<ResolvedConfig> {
    let run_path = if run_name.contains('/') {
        root_dir.join(format!("{run_name}.yaml"))
    } else {
        root_dir.join("runs").join(format!("{run_name}.yaml"))
    };
    let run_text = std::fs::read_to_string(&run_path).map_err(|e| Error::io(&run_path, e))?;
    let run_tree = Value::parse_str(&run_text)
        .map_err(|e| Error::Config(format!("{}: {e}", run_path.display())))?;

    let defaults = run_tree
        .get("defaults")
        .ok_or_else(|| Error::Config(format!("{}: missing `defaults` list", run_path.display())))?
        .as_list()
        .ok_or_else(|| Error::Config(format!("{}: `defaults` must be a list", run_path.display())))?;

    let mut selected: Vec<(String, String)> = Vec::new();
    for item in defaults {
        let entries = match item {
            Value::Map(entries) if entries.len() == 1 => entries,
            _ => {
                return Err(Error::Config(format!(
                    "{}: each defaults entry must be a single `group: name` pair",
                    run_path.display()
                )))
            }
        };
        let (group, name) = &entries[0];
        if !GROUPS.contains(&group.as_str()) {
            return Err(Error::Config(format!("unknown group `{group}` in defaults")));
        }
        let name = name
            .as_str()
            .ok_or_else(|| Error::Config(format!("defaults entry `{group}` must name a file")))?;
        if selected.iter().any(|(g, _)| g == group) {
            return Err(Error::Config(format!("group `{group}` selected twice in defaults")));
        }
        selected.push((group.clone(), name.to_string()));
    }

    let mut entries: Vec<(String, Value)> = Vec::new();
    for group in GROUPS {
        let name = selected
            .iter()
            .find(|(g, _)| g == group)
            .map(|(_, n)| n.as_str())
            .ok_or_else(|| Error::Config(format!("run file selects no `{group}` group")))?;
        entries.push((group.to_string(), load_group(root_dir, group, name)?));
    }
    let mut tree = Value::Map(entries);

    // Top-level keys of the run file other than `defaults` are inline
    // overrides of existing leaves.
    if let Value::Map(run_entries) = &run_tree {
        for (key, value) in run_entries {
            if key == "defaults" {
                continue;
            }
            merge_strict(&mut tree, &mut vec![key.clone()], value)?;
        }
    }

    for token in overrides {
        apply_override(&mut tree, root_dir, &parse_override(token)?)?;
    }

    ResolvedConfig::from_tree(tree)
}

/// Loads one group file; the file must contain exactly the group name as
/// its single top-level key, wrapping a mapping.
fn load_group(root_dir: &Path, group: &str, name: &str) -> Result<Value> {
    let path = group_file(root_dir, group, name);
    let text = std::fs::read_to_string(&path).map_err(|_| {
        Error::Config(format!(
            "group `{group}`: cannot read `{}`",
            path.display()
        ))
    })?;
    let tree =
        Value::parse_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    match &tree {
        Value::Map(entries) if entries.len() == 1 && entries[0].0 == group => {
            let body = entries[0].1.clone();
            match body {
                Value::Map(_) => Ok(body),
                _ => Err(Error::Config(format!(
                    "{}: group body must be a mapping",
                    path.display()
                ))),
            }
        }
        _ => Err(Error::Config(format!(
            "{}: expected a single top-level `{group}:` key",
            path.display()
        ))),
    }
}

/// Path of a group file within the config root.
pub fn group_file(root_dir: &Path, group: &str, name: &str) -> PathBuf {
    root_dir.join(group).join(format!("{name}.yaml"))
}

fn apply_override(tree: &mut Value, root_dir: &Path, ov: &Override) -> Result<()> {
    match ov {
        Override::GroupSwap { group, name } => {
            if !GROUPS.contains(&group.as_str()) {
                return Err(Error::Override {
                    path: group.clone(),
                    reason: "not a config group".into(),
                });
            }
            let body = load_group(root_dir, group, name)?;
            *tree.get_mut(group).expect("groups present") = body;
            Ok(())
        }
        Override::LeafSet { path, value } => set_leaf(tree, path, value.clone()),
    }
}

/// Sets an existing scalar leaf; unknown paths are rejected.
fn set_leaf(tree: &mut Value, path: &[String], value: Value) -> Result<()> {
    let full = path.join(".");
    let mut node = tree;
    for key in &path[..path.len() - 1] {
        node = node.get_mut(key).ok_or_else(|| Error::Override {
            path: full.clone(),
            reason: format!("unknown key `{key}`"),
        })?;
    }
    let leaf_key = &path[path.len() - 1];
    let leaf = node.get_mut(leaf_key).ok_or_else(|| Error::Override {
        path: full.clone(),
        reason: format!("unknown key `{leaf_key}`"),
    })?;
    if !leaf.is_scalar() {
        return Err(Error::Override { path: full, reason: "path is not a scalar leaf".into() });
    }
    *leaf = value;
    Ok(())
}

/// Strict deep-merge of inline run-file overrides: every leaf must already
/// exist in the target tree.
fn merge_strict(tree: &mut Value, path: &mut Vec<String>, value: &Value) -> Result<()> {
    match value {
        Value::Map(entries) if !entries.is_empty() => {
            for (key, child) in entries {
                path.push(key.clone());
                merge_strict(tree, path, child)?;
                path.pop();
            }
            Ok(())
        }
        scalar if scalar.is_scalar() => set_leaf(tree, path, scalar.clone()),
        other => {
            // Lists (and empty maps) replace wholesale if the key exists.
            let full = path.join(".");
            let mut node = &mut *tree;
            for key in &path[..path.len() - 1] {
                node = node.get_mut(key).ok_or_else(|| Error::Override {
                    path: full.clone(),
                    reason: format!("unknown key `{key}`"),
                })?;
            }
            let leaf_key = &path[path.len() - 1];
            let slot = node.get_mut(leaf_key).ok_or_else(|| Error::Override {
                path: full.clone(),
                reason: format!("unknown key `{leaf_key}`"),
            })?;
            *slot = other.clone();
            Ok(())
        }
    }
}
