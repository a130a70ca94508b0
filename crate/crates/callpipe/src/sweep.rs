//! Hyperparameter sweeps.
//!
//! A sweep file (same syntax as the config files) declares the search
//! method, the metric and its goal, a distribution per dotted config path
//! (or per group name, for group swaps), and optional hyperband early
//! termination. Candidates become override lists and run through an
//! [`Objective`]; hyperband pauses every run at geometrically spaced
//! epoch rungs (`min_iter · eta^k`) and keeps the best `ceil(n/eta)`.
//!
//! `method: bayes` is accepted for compatibility and downgraded to random
//! search with a logged note; the search space, metric goal, and early
//! termination behave the same.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{format_scalar, Value};
use crate::error::{Error, Result};

/// Whether larger or smaller metric values win.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    Maximize,
    Minimize,
}

impl Goal {
    /// True when `a` beats `b`.
    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Goal::Maximize => a > b,
            Goal::Minimize => a < b,
        }
    }
}

/// Candidate generation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Grid,
    Random,
}

/// Value distribution for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    Categorical(Vec<Value>),
    Uniform { min: f64, max: f64 },
    IntUniform { min: i64, max: i64 },
    Fixed(Value),
}

/// Hyperband early-termination settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyTerminate {
    None,
    Hyperband { min_iter: usize, eta: usize },
}

/// A parsed sweep definition.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub method: Method,
    /// Set when an unsupported method was downgraded (e.g. `bayes`).
    pub downgraded_from: Option<String>,
    pub metric_name: String,
    pub goal: Goal,
    /// `(config path, distribution)` in declaration order.
    pub parameters: Vec<(String, Distribution)>,
    pub early_terminate: EarlyTerminate,
    /// Run budget; the command line may override it.
    pub budget: Option<usize>,
}

/// One sampled configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// `(config path, sampled scalar)` in parameter order.
    pub assignments: Vec<(String, Value)>,
}

impl Candidate {
    /// Renders the assignments as CLI override tokens.
    pub fn override_tokens(&self) -> Vec<String> {
        self.assignments
            .iter()
            .map(|(path, value)| format!("{path}={}", format_scalar(value)))
            .collect()
    }
}

/// Parses a sweep file.
pub fn parse_sweep_spec(path: &Path) -> Result<SweepSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sweep_str(&text)
}

/// Parses sweep text (see [`parse_sweep_spec`]).
pub fn parse_sweep_str(text: &str) -> Result<SweepSpec> {
    let tree = Value::parse_str(text)?;
    let method_str = tree
        .get("method")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Sweep("missing `method`".into()))?;
    let (method, downgraded_from) = match method_str {
        "grid" => (Method::Grid, None),
        "random" => (Method::Random, None),
        "bayes" => (Method::Random, Some("bayes".to_string())),
        other => return Err(Error::Sweep(format!("unknown method `{other}`"))),
    };

    let metric = tree.get("metric").ok_or_else(|| Error::Sweep("missing `metric`".into()))?;
    let metric_name = metric
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Sweep("missing `metric.name`".into()))?
        .to_string();
    let goal = match metric.get("goal").and_then(Value::as_str) {
        Some("maximize") => Goal::Maximize,
        Some("minimize") => Goal::Minimize,
        other => return Err(Error::Sweep(format!("metric.goal must be maximize or minimize, got {other:?}"))),
    };

    let params_tree = tree
        .get("parameters")
        .ok_or_else(|| Error::Sweep("missing `parameters`".into()))?;
    let Value::Map(entries) = params_tree else {
        return Err(Error::Sweep("`parameters` must be a mapping".into()));
    };
    let mut parameters = Vec::new();
    for (path, body) in entries {
        let dist = parse_distribution(path, body)?;
        parameters.push((path.clone(), dist));
    }
    if parameters.is_empty() {
        return Err(Error::Sweep("no parameters declared".into()));
    }

    let early_terminate = match tree.get("early_terminate") {
        None => EarlyTerminate::None,
        Some(et) => match et.get("type").and_then(Value::as_str) {
            Some("hyperband") => {
                let min_iter = et
                    .get("min_iter")
                    .and_then(Value::as_i64)
                    .ok_or_else(|| Error::Sweep("hyperband needs `min_iter`".into()))?;
                if min_iter < 1 {
                    return Err(Error::Sweep("min_iter must be >= 1".into()));
                }
                let eta = et.get("eta").and_then(Value::as_i64).unwrap_or(3);
                if eta < 2 {
                    return Err(Error::Sweep("eta must be >= 2".into()));
                }
                EarlyTerminate::Hyperband { min_iter: min_iter as usize, eta: eta as usize }
            }
            other => return Err(Error::Sweep(format!("unknown early_terminate type {other:?}"))),
        },
    };

    let budget = match tree.get("budget") {
        None => None,
        Some(v) => Some(
            v.as_i64()
                .filter(|&b| b > 0)
                .ok_or_else(|| Error::Sweep("budget must be a positive integer".into()))?
                as usize,
        ),
    };

    Ok(SweepSpec { method, downgraded_from, metric_name, goal, parameters, early_terminate, budget })
}

fn parse_distribution(path: &str, body: &Value) -> Result<Distribution> {
    if let Some(value) = body.get("value") {
        if !value.is_scalar() {
            return Err(Error::Sweep(format!("{path}: fixed value must be a scalar")));
        }
        return Ok(Distribution::Fixed(value.clone()));
    }
    let kind = body
        .get("distribution")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Sweep(format!("{path}: needs `value` or `distribution`")))?;
    match kind {
        "categorical" => {
            let values = body
                .get("values")
                .and_then(Value::as_list)
                .ok_or_else(|| Error::Sweep(format!("{path}: categorical needs `values`")))?;
            if values.is_empty() {
                return Err(Error::Sweep(format!("{path}: empty categorical")));
            }
            if values.iter().any(|v| !v.is_scalar()) {
                return Err(Error::Sweep(format!("{path}: categorical values must be scalars")));
            }
            Ok(Distribution::Categorical(values.to_vec()))
        }
        "uniform" => {
            let min = body.get("min").and_then(Value::as_f64);
            let max = body.get("max").and_then(Value::as_f64);
            match (min, max) {
                (Some(min), Some(max)) if min < max => Ok(Distribution::Uniform { min, max }),
                _ => Err(Error::Sweep(format!("{path}: uniform needs min < max"))),
            }
        }
        "int_uniform" => {
            let min = body.get("min").and_then(Value::as_i64);
            let max = body.get("max").and_then(Value::as_i64);
            match (min, max) {
                (Some(min), Some(max)) if min < max => Ok(Distribution::IntUniform { min, max }),
                _ => Err(Error::Sweep(format!("{path}: int_uniform needs min < max"))),
            }
        }
        other => Err(Error::Sweep(format!("{path}: unknown distribution `{other}`"))),
    }
}

/// Draws one candidate, each parameter independently.
pub fn sample_candidate(spec: &SweepSpec, rng: &mut ChaCha8Rng) -> Candidate {
    let assignments = spec
        .parameters
        .iter()
        .map(|(path, dist)| {
            let value = match dist {
                Distribution::Fixed(v) => v.clone(),
                Distribution::Categorical(values) => {
                    values[rng.gen_range(0..values.len())].clone()
                }
                Distribution::Uniform { min, max } => Value::Float(rng.gen_range(*min..*max)),
                Distribution::IntUniform { min, max } => Value::Int(rng.gen_range(*min..=*max)),
            };
            (path.clone(), value)
        })
        .collect();
    Candidate { assignments }
}

/// Enumerates the full Cartesian product of an all-categorical space, in
/// lexicographic order (first parameter outermost).
pub fn enumerate_grid(spec: &SweepSpec) -> Result<Vec<Candidate>> {
    let mut axes: Vec<(&String, Vec<Value>)> = Vec::new();
    for (path, dist) in &spec.parameters {
        match dist {
            Distribution::Categorical(values) => axes.push((path, values.clone())),
            Distribution::Fixed(v) => axes.push((path, vec![v.clone()])),
            _ => {
                return Err(Error::Sweep(format!(
                    "grid search requires categorical or fixed parameters; `{path}` is continuous"
                )))
            }
        }
    }
    let mut out = vec![Candidate { assignments: Vec::new() }];
    for (path, values) in axes {
        let mut next = Vec::with_capacity(out.len() * values.len());
        for base in &out {
            for value in &values {
                let mut assignments = base.assignments.clone();
                assignments.push((path.clone(), value.clone()));
                next.push(Candidate { assignments });
            }
        }
        out = next;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Hyperband
// ---------------------------------------------------------------------------

/// Keeps the best `ceil(n/eta)` runs at a rung, goal-aware; ties break
/// toward the earlier run id. Returns the ids to continue.
pub fn hyperband_filter(runs_at_rung: &[(usize, f64)], eta: usize, goal: Goal) -> Vec<usize> {
    if runs_at_rung.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..runs_at_rung.len()).collect();
    order.sort_by(|&a, &b| {
        let (ida, ma) = runs_at_rung[a];
        let (idb, mb) = runs_at_rung[b];
        if ma == mb {
            return ida.cmp(&idb);
        }
        if goal.better(ma, mb) {
            std::cmp::Ordering::Less
        } else {
            std::cmp::Ordering::Greater
        }
    });
    let keep = runs_at_rung.len().div_ceil(eta);
    let mut ids: Vec<usize> = order[..keep].iter().map(|&i| runs_at_rung[i].0).collect();
    ids.sort_unstable();
    ids
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// One run in progress, advanced an epoch at a time. Runs advance on
/// worker threads, so implementations must be `Send`.
pub trait EpochRun: Send {
    /// Runs one epoch and returns the sweep metric, or `None` once the run
    /// has finished on its own (epoch budget or trainer early stopping).
    fn step(&mut self) -> Result<Option<f64>>;
}

/// Launches runs for candidates.
pub trait Objective {
    fn start(&mut self, run_index: usize, candidate: &Candidate) -> Result<Box<dyn EpochRun>>;
}

/// Terminal state of one sweep run.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Finished,
    EarlyTerminated,
    Failed,
}

/// The outcome of one run.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub run_index: usize,
    pub candidate: Candidate,
    pub history: Vec<f64>,
    pub status: RunStatus,
    /// Best-so-far metric under the goal; `None` when the run failed
    /// before producing any epoch.
    pub final_metric: Option<f64>,
    pub error: Option<String>,
}

struct ActiveRun {
    run_index: usize,
    run: Box<dyn EpochRun>,
    history: Vec<f64>,
    done: bool,
}

fn best_so_far(history: &[f64], goal: Goal) -> Option<f64> {
    history.iter().copied().reduce(|a, b| if goal.better(b, a) { b } else { a })
}

/// Runs a sweep to completion and returns the leaderboard, best first.
///
/// Candidates come from the grid (truncated to the budget) or from
/// `budget` random draws. With hyperband, every surviving run advances to
/// each rung (`min_iter · eta^k` epochs) before the cut; no run is ever
/// terminated before `min_iter` epochs. Individual run failures are
/// recorded, not fatal.
pub fn run_sweep(
    spec: &SweepSpec,
    budget: usize,
    workers: usize,
    rng: &mut ChaCha8Rng,
    objective: &mut dyn Objective,
) -> Result<Vec<SweepRun>> {
    if budget == 0 {
        return Err(Error::Sweep("budget must be at least 1".into()));
    }
    let candidates: Vec<Candidate> = match spec.method {
        Method::Grid => {
            let mut all = enumerate_grid(spec)?;
            all.truncate(budget);
            all
        }
        Method::Random => (0..budget).map(|_| sample_candidate(spec, rng)).collect(),
    };

    let mut results: Vec<SweepRun> = Vec::new();
    let mut active: Vec<ActiveRun> = Vec::new();
    for (run_index, candidate) in candidates.iter().enumerate() {
        match objective.start(run_index, candidate) {
            Ok(run) => active.push(ActiveRun { run_index, run, history: Vec::new(), done: false }),
            Err(e) => results.push(SweepRun {
                run_index,
                candidate: candidate.clone(),
                history: Vec::new(),
                status: RunStatus::Failed,
                final_metric: None,
                error: Some(e.to_string()),
            }),
        }
    }

    let mut rung_level = 0u32;
    while !active.is_empty() {
        // Advance every active run to the next synchronization point.
        let target = match spec.early_terminate {
            EarlyTerminate::Hyperband { min_iter, eta } => {
                Some(min_iter * eta.pow(rung_level))
            }
            EarlyTerminate::None => None,
        };
        // Runs are independent; advance them on a bounded worker pool and
        // synchronize here before the hyperband cut.
        let advance = |entry: &mut ActiveRun| -> Option<(usize, String)> {
            while !entry.done && target.is_none_or(|t| entry.history.len() < t) {
                match entry.run.step() {
                    Ok(Some(metric)) => entry.history.push(metric),
                    Ok(None) => entry.done = true,
                    Err(e) => {
                        entry.done = true;
                        return Some((entry.run_index, e.to_string()));
                    }
                }
            }
            None
        };
        let mut failed: Vec<(usize, String)> = Vec::new();
        if workers <= 1 || active.len() <= 1 {
            for entry in &mut active {
                failed.extend(advance(entry));
            }
        } else {
            let chunk_size = active.len().div_ceil(workers);
            let chunk_failures = std::thread::scope(|scope| {
                let handles: Vec<_> = active
                    .chunks_mut(chunk_size)
                    .map(|chunk| {
                        scope.spawn(|| {
                            chunk.iter_mut().filter_map(advance).collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("sweep worker panicked"))
                    .collect::<Vec<_>>()
            });
            failed.extend(chunk_failures);
        }

        // Retire failed and naturally finished runs.
        let mut still_active = Vec::new();
        for entry in active {
            if let Some((_, error)) = failed.iter().find(|(id, _)| *id == entry.run_index) {
                results.push(SweepRun {
                    run_index: entry.run_index,
                    candidate: candidates[entry.run_index].clone(),
                    final_metric: best_so_far(&entry.history, spec.goal),
                    history: entry.history,
                    status: RunStatus::Failed,
                    error: Some(error.clone()),
                });
            } else if entry.done {
                results.push(SweepRun {
                    run_index: entry.run_index,
                    candidate: candidates[entry.run_index].clone(),
                    final_metric: best_so_far(&entry.history, spec.goal),
                    history: entry.history,
                    status: RunStatus::Finished,
                    error: None,
                });
            } else {
                still_active.push(entry);
            }
        }
        active = still_active;

        // Hyperband cut at the rung.
        if let EarlyTerminate::Hyperband { eta, .. } = spec.early_terminate {
            if active.len() > 1 {
                let at_rung: Vec<(usize, f64)> = active
                    .iter()
                    .map(|e| (e.run_index, best_so_far(&e.history, spec.goal).unwrap()))
                    .collect();
                let keep = hyperband_filter(&at_rung, eta, spec.goal);
                let mut survivors = Vec::new();
                for entry in active {
                    if keep.contains(&entry.run_index) {
                        survivors.push(entry);
                    } else {
                        results.push(SweepRun {
                            run_index: entry.run_index,
                            candidate: candidates[entry.run_index].clone(),
                            final_metric: best_so_far(&entry.history, spec.goal),
                            history: entry.history,
                            status: RunStatus::EarlyTerminated,
                            error: None,
                        });
                    }
                }
                active = survivors;
            }
            rung_level += 1;
        }
    }

    // Leaderboard order: goal-aware on the final metric, failures last,
    // ties toward the earlier run.
    results.sort_by(|a, b| match (a.final_metric, b.final_metric) {
        (Some(ma), Some(mb)) if ma != mb => {
            if spec.goal.better(ma, mb) {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        }
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        _ => a.run_index.cmp(&b.run_index),
    });
    Ok(results)
}

// ---------------------------------------------------------------------------
// Parameter importance
// ---------------------------------------------------------------------------

/// One entry of the importance report.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ImportanceEntry {
    /// Parameter path, or `path=value` for one categorical indicator.
    pub parameter: String,
    /// `|correlation|`.
    pub importance: f64,
    /// Signed Pearson correlation with the final metric.
    pub correlation: f64,
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return 0.0;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

/// Correlation-based importance over finished runs.
///
/// Numeric parameters correlate directly with the final metric;
/// categorical parameters contribute one indicator column per observed
/// value. Zero-variance parameters report importance 0. Entries come back
/// sorted by importance, descending.
pub fn parameter_importance(runs: &[SweepRun]) -> Result<Vec<ImportanceEntry>> {
    let finished: Vec<&SweepRun> = runs
        .iter()
        .filter(|r| r.final_metric.is_some() && r.status != RunStatus::Failed)
        .collect();
    if finished.len() < 3 {
        return Err(Error::Sweep(format!(
            "parameter importance needs at least 3 finished runs, got {}",
            finished.len()
        )));
    }
    let metrics: Vec<f64> = finished.iter().map(|r| r.final_metric.unwrap()).collect();

    let mut entries = Vec::new();
    let params: Vec<String> =
        finished[0].candidate.assignments.iter().map(|(p, _)| p.clone()).collect();
    for (pi, path) in params.iter().enumerate() {
        let values: Vec<&Value> =
            finished.iter().map(|r| &r.candidate.assignments[pi].1).collect();
        let numeric: Option<Vec<f64>> = values.iter().map(|v| v.as_f64()).collect();
        match numeric {
            Some(xs) => {
                let correlation = pearson(&xs, &metrics);
                entries.push(ImportanceEntry {
                    parameter: path.clone(),
                    importance: correlation.abs(),
                    correlation,
                });
            }
            None => {
                let mut distinct: Vec<String> =
                    values.iter().map(|v| format_scalar(v)).collect();
                distinct.sort();
                distinct.dedup();
                for choice in distinct {
                    let xs: Vec<f64> = values
                        .iter()
                        .map(|v| f64::from(u8::from(format_scalar(v) == choice)))
                        .collect();
                    let correlation = pearson(&xs, &metrics);
                    entries.push(ImportanceEntry {
                        parameter: format!("{path}={choice}"),
                        importance: correlation.abs(),
                        correlation,
                    });
                }
            }
        }
    }
    entries.sort_by(|a, b| {
        b.importance
            .partial_cmp(&a.importance)
            .unwrap()
            .then_with(|| a.parameter.cmp(&b.parameter))
    });
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Writes `leaderboard.csv`: rank, run id, status, metric, overrides.
pub fn write_leaderboard_csv(runs: &[SweepRun], path: &Path) -> Result<()> {
    let mut out = String::from("rank,run,status,metric,overrides\n");
    for (rank, run) in runs.iter().enumerate() {
        let status = match run.status {
            RunStatus::Finished => "finished",
            RunStatus::EarlyTerminated => "early-terminated",
            RunStatus::Failed => "failed",
        };
        let metric = run.final_metric.map_or(String::new(), |m| format!("{m:.6}"));
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            rank + 1,
            run.run_index,
            status,
            metric,
            run.candidate.override_tokens().join(" ")
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `importance.csv`: parameter, importance, correlation.
pub fn write_importance_csv(entries: &[ImportanceEntry], path: &Path) -> Result<()> {
    let mut out = String::from("parameter,importance,correlation\n");
    for e in entries {
        out.push_str(&format!("{},{:.6},{:.6}\n", e.parameter, e.importance, e.correlation));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};

    const SPEC_TEXT: &str = "\
method: bayes
metric:
  goal: maximize
  name: auc
parameters:
  model:
    distribution: categorical
    values:
      - defaults
      - resnet
      - vgg
  optim.epochs:
    value: 100
  data.train_dataset.augmentations_p:
    distribution: uniform
    min: 0
    max: 1
  experiment.run_id:
    distribution: int_uniform
    min: 0
    max: 100000000
early_terminate:
  type: hyperband
  min_iter: 10
";

    #[test]
    fn parses_full_sweep_file() {
        let spec = parse_sweep_str(SPEC_TEXT).unwrap();
        assert_eq!(spec.method, Method::Random);
        assert_eq!(spec.downgraded_from.as_deref(), Some("bayes"));
        assert_eq!(spec.metric_name, "auc");
        assert_eq!(spec.goal, Goal::Maximize);
        assert_eq!(spec.parameters.len(), 4);
        match &spec.parameters[0].1 {
            Distribution::Categorical(values) => assert_eq!(values.len(), 3),
            other => panic!("{other:?}"),
        }
        assert_eq!(spec.parameters[1].1, Distribution::Fixed(Value::Int(100)));
        assert_eq!(
            spec.early_terminate,
            EarlyTerminate::Hyperband { min_iter: 10, eta: 3 }
        );
    }

    #[test]
    fn unknown_distribution_names_the_path() {
        let text = "method: random\nmetric:\n  goal: maximize\n  name: auc\nparameters:\n  optim.lr:\n    distribution: log_normal\n    min: 0\n    max: 1\n";
        let err = parse_sweep_str(text).unwrap_err().to_string();
        assert!(err.contains("optim.lr") && err.contains("log_normal"), "{err}");
    }

    #[test]
    fn int_uniform_samples_stay_in_bounds() {
        let spec = parse_sweep_str(SPEC_TEXT).unwrap();
        let mut rng = derive(1, Stream::Sweep);
        for _ in 0..1000 {
            let c = sample_candidate(&spec, &mut rng);
            match &c.assignments[3].1 {
                Value::Int(v) => assert!((0..=100_000_000).contains(v)),
                other => panic!("{other:?}"),
            }
            match &c.assignments[1].1 {
                Value::Int(100) => {}
                other => panic!("fixed value drifted: {other:?}"),
            }
        }
    }

    #[test]
    fn uniform_sampling_statistics() {
        let spec = parse_sweep_str(SPEC_TEXT).unwrap();
        let mut rng = derive(2, Stream::Sweep);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let c = sample_candidate(&spec, &mut rng);
            match &c.assignments[2].1 {
                Value::Float(v) => sum += v,
                other => panic!("{other:?}"),
            }
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() <= 0.01, "{mean}");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let spec = parse_sweep_str(SPEC_TEXT).unwrap();
        let mut a = derive(3, Stream::Sweep);
        let mut b = derive(3, Stream::Sweep);
        for _ in 0..100 {
            assert_eq!(sample_candidate(&spec, &mut a), sample_candidate(&spec, &mut b));
        }
    }

    #[test]
    fn grid_enumeration_order() {
        let text = "method: grid\nmetric:\n  goal: maximize\n  name: auc\nparameters:\n  a:\n    distribution: categorical\n    values:\n      - 1\n      - 2\n  b:\n    distribution: categorical\n    values:\n      - x\n      - y\n";
        let spec = parse_sweep_str(text).unwrap();
        let grid = enumerate_grid(&spec).unwrap();
        let tokens: Vec<Vec<String>> = grid.iter().map(Candidate::override_tokens).collect();
        assert_eq!(
            tokens,
            vec![
                vec!["a=1".to_string(), "b=x".to_string()],
                vec!["a=1".to_string(), "b=y".to_string()],
                vec!["a=2".to_string(), "b=x".to_string()],
                vec!["a=2".to_string(), "b=y".to_string()],
            ]
        );
    }

    #[test]
    fn grid_rejects_continuous() {
        let spec = parse_sweep_str(SPEC_TEXT).unwrap();
        assert!(enumerate_grid(&spec).is_err());
    }

    #[test]
    fn hyperband_keeps_top_fraction() {
        let runs: Vec<(usize, f64)> =
            (0..9).map(|i| (i, 0.1 * i as f64)).collect();
        let keep = hyperband_filter(&runs, 3, Goal::Maximize);
        assert_eq!(keep, vec![6, 7, 8]);
        let keep_min = hyperband_filter(&runs, 3, Goal::Minimize);
        assert_eq!(keep_min, vec![0, 1, 2]);
        assert_eq!(hyperband_filter(&[(0, 0.5)], 3, Goal::Maximize), vec![0]);
        // Ties break toward the earlier run id.
        let tied = vec![(0, 0.5), (1, 0.5), (2, 0.5)];
        assert_eq!(hyperband_filter(&tied, 3, Goal::Maximize), vec![0]);
    }

    /// Deterministic stub: the metric depends on one categorical choice.
    struct StubObjective {
        epochs: usize,
    }

    struct StubRun {
        base: f64,
        epoch: usize,
        epochs: usize,
    }

    impl EpochRun for StubRun {
        fn step(&mut self) -> Result<Option<f64>> {
            if self.epoch >= self.epochs {
                return Ok(None);
            }
            self.epoch += 1;
            // Rises toward an asymptote that depends on the candidate.
            Ok(Some(self.base * (1.0 - 0.5f64.powi(self.epoch as i32))))
        }
    }

    impl Objective for StubObjective {
        fn start(&mut self, _run_index: usize, candidate: &Candidate) -> Result<Box<dyn EpochRun>> {
            let choice = candidate
                .assignments
                .iter()
                .find(|(p, _)| p == "model")
                .and_then(|(_, v)| v.as_str().map(str::to_string))
                .unwrap();
            let noise = candidate
                .assignments
                .iter()
                .find(|(p, _)| p == "experiment.run_id")
                .and_then(|(_, v)| v.as_i64())
                .unwrap_or(0) as f64;
            let base = match choice.as_str() {
                "good" => 0.95,
                "bad" => 0.4 + 1e-9 * noise,
                _ => 0.2 + 1e-9 * noise,
            };
            Ok(Box::new(StubRun { base, epoch: 0, epochs: self.epochs }))
        }
    }

    fn stub_spec(method: &str, goal: &str, hyperband: bool) -> SweepSpec {
        let et = if hyperband {
            "early_terminate:\n  type: hyperband\n  min_iter: 10\n  eta: 3\n"
        } else {
            ""
        };
        parse_sweep_str(&format!(
            "method: {method}\nmetric:\n  goal: {goal}\n  name: auc\nparameters:\n  model:\n    distribution: categorical\n    values:\n      - good\n      - bad\n      - worse\n  experiment.run_id:\n    distribution: int_uniform\n    min: 0\n    max: 1000000\n{et}"
        ))
        .unwrap()
    }

    #[test]
    fn dominant_candidate_ranks_first() {
        let spec = stub_spec("random", "maximize", true);
        let mut rng = derive(7, Stream::Sweep);
        let mut objective = StubObjective { epochs: 40 };
        let results = run_sweep(&spec, 20, 1, &mut rng, &mut objective).unwrap();
        assert_eq!(results.len(), 20);
        let winner = &results[0];
        let choice = winner.candidate.assignments[0].1.as_str().unwrap();
        assert_eq!(choice, "good");
        assert!(winner.final_metric.unwrap() > 0.9);
    }

    #[test]
    fn no_run_terminates_before_min_iter() {
        let spec = stub_spec("random", "maximize", true);
        let mut rng = derive(8, Stream::Sweep);
        let mut objective = StubObjective { epochs: 40 };
        let results = run_sweep(&spec, 20, 1, &mut rng, &mut objective).unwrap();
        for run in &results {
            if run.status == RunStatus::EarlyTerminated {
                assert!(run.history.len() >= 10, "run {} cut at {}", run.run_index, run.history.len());
            }
        }
        assert!(results.iter().any(|r| r.status == RunStatus::EarlyTerminated));
    }

    #[test]
    fn budget_one_gives_single_finished_run() {
        let spec = stub_spec("random", "maximize", true);
        let mut rng = derive(9, Stream::Sweep);
        let mut objective = StubObjective { epochs: 12 };
        let results = run_sweep(&spec, 1, 1, &mut rng, &mut objective).unwrap();
        assert_eq!(results.len(), 1);
        assert_eq!(results[0].status, RunStatus::Finished);
    }

    #[test]
    fn goal_reversal_reverses_the_leaderboard() {
        let max_spec = stub_spec("grid", "maximize", false);
        let min_spec = stub_spec("grid", "minimize", false);
        // Grid over the categorical alone (drop the int_uniform axis).
        let strip = |mut s: SweepSpec| {
            s.parameters.truncate(1);
            s
        };
        let (max_spec, min_spec) = (strip(max_spec), strip(min_spec));
        let mut rng = derive(10, Stream::Sweep);
        let mut objective = StubObjective { epochs: 12 };
        let up = run_sweep(&max_spec, 3, 1, &mut rng, &mut objective).unwrap();
        let down = run_sweep(&min_spec, 3, 1, &mut rng, &mut objective).unwrap();
        let ids = |runs: &[SweepRun]| runs.iter().map(|r| r.run_index).collect::<Vec<_>>();
        let mut reversed = ids(&down);
        reversed.reverse();
        assert_eq!(ids(&up), reversed);
    }

    #[test]
    fn sweep_is_deterministic() {
        let spec = stub_spec("random", "maximize", true);
        let run = |workers: usize| {
            let mut rng = derive(11, Stream::Sweep);
            let mut objective = StubObjective { epochs: 25 };
            run_sweep(&spec, 10, workers, &mut rng, &mut objective)
                .unwrap()
                .iter()
                .map(|r| (r.run_index, r.final_metric, r.status.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(1));
        // Worker count never changes the leaderboard.
        assert_eq!(run(1), run(3));
    }

    fn importance_fixture(n: usize, f: impl Fn(usize, f64) -> f64) -> Vec<SweepRun> {
        let mut rng = derive(12, Stream::Sweep);
        (0..n)
            .map(|i| {
                let x = rng.gen_range(0.0f64..1.0);
                let decoy = rng.gen_range(0.0f64..1.0);
                let metric = f(i, x);
                SweepRun {
                    run_index: i,
                    candidate: Candidate {
                        assignments: vec![
                            ("controlling".into(), Value::Float(x)),
                            ("decoy".into(), Value::Float(decoy)),
                        ],
                    },
                    history: vec![metric],
                    status: RunStatus::Finished,
                    final_metric: Some(metric),
                    error: None,
                }
            })
            .collect()
    }

    #[test]
    fn importance_finds_the_controlling_parameter() {
        let runs = importance_fixture(1000, |_, x| x);
        let entries = parameter_importance(&runs).unwrap();
        assert_eq!(entries[0].parameter, "controlling");
        assert!(entries[0].importance >= 0.9);
        assert!((entries[0].correlation - 1.0).abs() < 1e-9);
        let decoy = entries.iter().find(|e| e.parameter == "decoy").unwrap();
        assert!(decoy.importance < 0.1, "{}", decoy.importance);
    }

    #[test]
    fn constant_parameter_has_zero_importance() {
        let mut runs = importance_fixture(10, |_, x| x);
        for run in &mut runs {
            run.candidate.assignments[1].1 = Value::Float(0.5);
        }
        let entries = parameter_importance(&runs).unwrap();
        let decoy = entries.iter().find(|e| e.parameter == "decoy").unwrap();
        assert_eq!(decoy.importance, 0.0);
    }

    #[test]
    fn categorical_importance_uses_indicators() {
        let mut rng = derive(13, Stream::Sweep);
        let runs: Vec<SweepRun> = (0..100)
            .map(|i| {
                let good = rng.gen_range(0..2) == 0;
                let metric = if good { 0.9 } else { 0.3 };
                SweepRun {
                    run_index: i,
                    candidate: Candidate {
                        assignments: vec![(
                            "model".into(),
                            Value::Str(if good { "good".into() } else { "bad".into() }),
                        )],
                    },
                    history: vec![metric],
                    status: RunStatus::Finished,
                    final_metric: Some(metric),
                    error: None,
                }
            })
            .collect();
        let entries = parameter_importance(&runs).unwrap();
        let good = entries.iter().find(|e| e.parameter == "model=good").unwrap();
        assert!(good.correlation > 0.99);
        let bad = entries.iter().find(|e| e.parameter == "model=bad").unwrap();
        assert!(bad.correlation < -0.99);
    }

    #[test]
    fn importance_needs_three_runs() {
        let runs = importance_fixture(2, |_, x| x);
        assert!(parameter_importance(&runs).is_err());
    }
}
