use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{average_incremental_accuracy, EvalReport};
use crate::data::BenchmarkSpec;
use crate::engine::{run_sequence, Scheme, SchemeConfig, StepDiagnostics};
use crate::error::{Error, Result};
use crate::net::write_checkpoint;
use crate::partition::PartitionPlan;

/// Environment variable capping the number of concurrent cells.
pub const WORKERS_ENV: &str = "SBCIL_WORKERS";

/// Sweep over schemes, task counts and seeds sharing one benchmark and one
/// base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentMatrix {
    pub schemes: Vec<Scheme>,
    pub task_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub benchmark: BenchmarkSpec,
    /// `scheme` and `seed` are overridden per cell.
    pub scheme_config: SchemeConfig,
}

impl Default for ExperimentMatrix {
    fn default() -> Self {
        ExperimentMatrix {
            schemes: vec![Scheme::Sb, Scheme::Std],
            task_counts: vec![2],
            seeds: vec![0, 1, 2],
            benchmark: BenchmarkSpec::default(),
            scheme_config: SchemeConfig::default(),
        }
    }
}

/// One (scheme, task count, seed) combination.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub scheme: Scheme,
    pub num_tasks: usize,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}-t{}-s{}", self.scheme, self.num_tasks, self.seed)
    }
}

impl ExperimentMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() || self.task_counts.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid(
                "experiment matrix needs at least one scheme, task count and seed",
            ));
        }
        // task counts that do not divide the classes fail their own cells
        self.scheme_config.validate()
    }

    /// Cells in scheme-major, then task-count, then seed order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &scheme in &self.schemes {
            for &num_tasks in &self.task_counts {
                for &seed in &self.seeds {
                    out.push(Cell {
                        scheme,
                        num_tasks,
                        seed,
                    });
                }
            }
        }
        out
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub cell: String,
    pub scheme: Scheme,
    pub num_tasks: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepManifest {
    pub step: usize,
    /// Checkpoint path relative to the output directory.
    pub checkpoint: String,
    pub report: EvalReport,
    pub plan: Option<PartitionPlan>,
    pub diagnostics: StepDiagnostics,
    pub memory_len: usize,
}

/// Everything needed to reproduce and inspect one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellManifest {
    pub cell: String,
    pub scheme: Scheme,
    pub num_tasks: usize,
    pub seed: u64,
    pub created_unix: u64,
    pub benchmark: BenchmarkSpec,
    pub config: SchemeConfig,
    /// `class_map[remapped] = original` class index.
    pub class_map: Vec<usize>,
    pub steps: Vec<StepManifest>,
    pub average_incremental_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatrixOutcome {
    pub rows: Vec<MetricRow>,
    pub manifests: Vec<PathBuf>,
    pub failures: Vec<CellFailure>,
}

impl MatrixOutcome {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Trains one cell and writes its checkpoints and manifest under `out_dir`.
pub fn run_cell(
    matrix: &ExperimentMatrix,
    cell: &Cell,
    out_dir: &Path,
) -> Result<(CellManifest, Vec<MetricRow>)> {
    let name = cell.name();
    let benchmark = BenchmarkSpec {
        num_tasks: cell.num_tasks,
        ..matrix.benchmark.clone()
    };
    let config = SchemeConfig {
        scheme: cell.scheme,
        seed: cell.seed,
        ..matrix.scheme_config.clone()
    };
    let seq = benchmark.build(cell.seed)?;
    let records = run_sequence(&seq, &config)?;
    let mut steps = Vec::with_capacity(records.len());
    let mut rows = Vec::with_capacity(records.len());
    for rec in records {
        let rel = format!("checkpoints/{name}/step-{}.sbnc", rec.step);
        let mut bytes = Vec::new();
        write_checkpoint(&rec.net, &mut bytes)?;
        write_atomic(&out_dir.join(&rel), &bytes)?;
        rows.push(MetricRow {
            cell: name.clone(),
            scheme: cell.scheme,
            num_tasks: cell.num_tasks,
            seed: cell.seed,
            report: rec.report.clone(),
        });
        steps.push(StepManifest {
            step: rec.step,
            checkpoint: rel,
            report: rec.report,
            plan: rec.plan,
            diagnostics: rec.diagnostics,
            memory_len: rec.memory_len,
        });
    }
    let reports: Vec<EvalReport> = steps.iter().map(|s| s.report.clone()).collect();
    let manifest = CellManifest {
        cell: name.clone(),
        scheme: cell.scheme,
        num_tasks: cell.num_tasks,
        seed: cell.seed,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        benchmark,
        config,
        class_map: seq.class_map.clone(),
        steps,
        average_incremental_accuracy: average_incremental_accuracy(&reports).ok(),
    };
    write_atomic(
        &out_dir.join("manifests").join(format!("{name}.json")),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok((manifest, rows))
}

fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every cell on a bounded worker pool, then writes `metrics.jsonl`,
/// `summary.csv` and `failures.json`. A failing cell is recorded and the
/// remaining cells still run.
pub fn run_matrix(matrix: &ExperimentMatrix, out_dir: &Path) -> Result<MatrixOutcome> {
    matrix.validate()?;
    fs::create_dir_all(out_dir)?;
    let cells = matrix.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let results: Vec<Result<(CellManifest, Vec<MetricRow>)>> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| run_cell(matrix, c, out_dir))
            .collect()
    });

    let mut outcome = MatrixOutcome::default();
    for (cell, result) in cells.iter().zip(results) {
        match result {
            Ok((manifest, rows)) => {
                outcome.manifests.push(
                    out_dir
                        .join("manifests")
                        .join(format!("{}.json", manifest.cell)),
                );
                outcome.rows.extend(rows);
            }
            Err(e) => outcome.failures.push(CellFailure {
                cell: cell.name(),
                error: e.to_string(),
            }),
        }
    }
    write_jsonl(&out_dir.join("metrics.jsonl"), &outcome.rows)?;
    write_summary_csv(&out_dir.join("summary.csv"), &summarize(&outcome.rows))?;
    write_atomic(
        &out_dir.join("failures.json"),
        &serde_json::to_vec_pretty(&outcome.failures)?,
    )?;
    Ok(outcome)
}

pub fn write_jsonl(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRow>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std })
    }

    /// Standard error of the mean for `n` samples.
    pub fn sem(&self, n: usize) -> f64 {
        self.std / (n as f64).sqrt()
    }
}

/// One line of `summary.csv`. `step` is the task index or `"avg"` for the
/// per-seed mean over steps after the first.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub scheme: Scheme,
    pub num_tasks: usize,
    pub step: String,
    pub seeds: usize,
    pub overall: Option<Stat>,
    pub old: Option<Stat>,
    pub new: Option<Stat>,
    pub intra_old: Option<Stat>,
    pub intra_new: Option<Stat>,
}

type Metrics = [Option<f64>; 5];

fn metrics(r: &EvalReport) -> Metrics {
    [
        Some(r.overall_acc),
        r.old_acc,
        Some(r.new_acc),
        r.intra_old_acc,
        Some(r.intra_new_acc),
    ]
}

fn summary_row(scheme: Scheme, num_tasks: usize, step: String, per_seed: &[Metrics]) -> SummaryRow {
    let stat = |k: usize| Stat::of(&per_seed.iter().filter_map(|m| m[k]).collect::<Vec<_>>());
    SummaryRow {
        scheme,
        num_tasks,
        step,
        seeds: per_seed.len(),
        overall: stat(0),
        old: stat(1),
        new: stat(2),
        intra_old: stat(3),
        intra_new: stat(4),
    }
}

/// Aggregates metric rows over seeds, per (scheme, task count, step), plus
/// an `avg` row per (scheme, task count) when there are at least two steps.
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    // (scheme, tasks) -> seed -> step -> metrics; first-seen order of groups is kept
    let mut order: Vec<(Scheme, usize)> = Vec::new();
    let mut groups: BTreeMap<(Scheme, usize), BTreeMap<u64, BTreeMap<usize, Metrics>>> =
        BTreeMap::new();
    for r in rows {
        let key = (r.scheme, r.num_tasks);
        if !order.contains(&key) {
            order.push(key);
        }
        groups
            .entry(key)
            .or_default()
            .entry(r.seed)
            .or_default()
            .insert(r.report.step, metrics(&r.report));
    }
    let mut out = Vec::new();
    for key in order {
        let seeds = &groups[&key];
        let steps: BTreeSet<usize> = seeds.values().flat_map(|s| s.keys().copied()).collect();
        for &step in &steps {
            let per_seed: Vec<Metrics> = seeds
                .values()
                .filter_map(|s| s.get(&step).copied())
                .collect();
            out.push(summary_row(key.0, key.1, step.to_string(), &per_seed));
        }
        let averaged: Vec<Metrics> = seeds
            .values()
            .filter(|s| s.len() >= 2)
            .map(|s| {
                let tail: Vec<&Metrics> =
                    s.iter().filter(|(&k, _)| k >= 2).map(|(_, m)| m).collect();
                std::array::from_fn(|k| {
                    let vals: Vec<f64> = tail.iter().filter_map(|m| m[k]).collect();
                    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                })
            })
            .collect();
        if !averaged.is_empty() {
            out.push(summary_row(key.0, key.1, "avg".into(), &averaged));
        }
    }
    out
}

pub const SUMMARY_HEADER: [&str; 14] = [
    "scheme",
    "num_tasks",
    "step",
    "seeds",
    "overall_mean",
    "overall_std",
    "old_mean",
    "old_std",
    "new_mean",
    "new_std",
    "intra_old_mean",
    "intra_old_std",
    "intra_new_mean",
    "intra_new_std",
];

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(SUMMARY_HEADER).map_err(csv_err)?;
        for r in rows {
            let mut rec = vec![
                r.scheme.to_string(),
                r.num_tasks.to_string(),
                r.step.clone(),
                r.seeds.to_string(),
            ];
            for s in [r.overall, r.old, r.new, r.intra_old, r.intra_new] {
                match s {
                    Some(s) => {
                        rec.push(format!("{:?}", s.mean));
                        rec.push(format!("{:?}", s.std));
                    }
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
    }
    write_atomic(path, &buf)
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

/// Renders rows as an aligned plain-text table.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>5} {:>5} {:>5} {:>15} {:>15} {:>15} {:>15} {:>15}",
        "scheme", "tasks", "step", "seeds", "overall", "old", "new", "intra_old", "intra_new"
    );
    for r in rows {
        let cell =
            |x: Option<Stat>| x.map_or("-".to_string(), |x| format!("{:.4}±{:.4}", x.mean, x.std));
        let _ = writeln!(
            s,
            "{:<8} {:>5} {:>5} {:>5} {:>15} {:>15} {:>15} {:>15} {:>15}",
            r.scheme.to_string(),
            r.num_tasks,
            r.step,
            r.seeds,
            cell(r.overall),
            cell(r.old),
            cell(r.new),
            cell(r.intra_old),
            cell(r.intra_new)
        );
    }
    s
}
