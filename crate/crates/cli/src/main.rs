//! `splitbridge` command-line driver: single runs, sweeps, checkpoint
//! evaluation, dataset generation and the two-task distillation ablation.

mod config;

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use splitbridge::data::{gen_glyphs, gen_synthetic, save_csv, write_idx, GaussianSpec, GlyphSpec};
use splitbridge::engine::Scheme;
use splitbridge::eval::{
    evaluate, format_table, run_matrix, summarize, CellManifest, ExperimentMatrix, MatrixOutcome,
    MetricRow, Stat, WORKERS_ENV,
};
use splitbridge::net::read_checkpoint;
use thiserror::Error;

use config::{ConfigError, Preset};

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] splitbridge::error::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("{0} of {1} cells failed (see failures.json)")]
    CellsFailed(usize, usize),
}

#[derive(Debug, Parser)]
#[command(
    name = "splitbridge",
    version,
    about = "Class-incremental learning with Split-and-Bridge and baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one scheme on one task sequence and write its manifest.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scheme: Option<Scheme>,
    },
    /// Sweep schemes x task counts x seeds (workers capped by SBCIL_WORKERS).
    Matrix {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "schemes")]
        scheme: Option<Scheme>,
        #[arg(long, value_delimiter = ',')]
        schemes: Option<Vec<Scheme>>,
        #[arg(long, value_delimiter = ',', conflicts_with = "tasks")]
        task_counts: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
        seeds: Option<Vec<u64>>,
    },
    /// Score a checkpoint on the test sets of the benchmark it was trained on.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "gaussian")]
        preset: Preset,
        /// Run seed the benchmark was built with.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        tasks: Option<usize>,
        /// Tasks seen so far; inferred from the output width when omitted.
        #[arg(long)]
        step: Option<usize>,
    },
    /// Write a synthetic dataset (CSV for gaussian, IDX for glyphs).
    GenData(GenData),
    /// Two-task ablation: cross-entropy only vs distillation + cross-entropy.
    ReplicateTable1 {
        #[command(flatten)]
        common: Common,
        #[arg(
            long,
            value_delimiter = ',',
            conflicts_with = "seed",
            default_value = "0,1,2,3,4,5,6,7"
        )]
        seeds: Vec<u64>,
    },
}

/// Config file plus flag overrides shared by the training commands.
#[derive(Debug, Args)]
struct Common {
    /// JSON config merged onto the preset's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gaussian")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    memory_size: Option<usize>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentMatrix, CliError> {
        let mut m = config::load(self.preset, self.config.as_deref())?;
        let c = &mut m.scheme_config;
        if let Some(v) = self.rho {
            c.rho = v;
        }
        if let Some(v) = self.gamma {
            c.gamma = v;
        }
        if let Some(v) = self.tau {
            c.temperature = v;
        }
        if let Some(v) = self.memory_size {
            c.memory_size = v;
        }
        if let Some(s) = self.seed {
            c.seed = s;
            m.seeds = vec![s];
        }
        if let Some(n) = self.tasks {
            m.benchmark.num_tasks = n;
            m.task_counts = vec![n];
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DataKind {
    Gaussian,
    Glyphs,
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long, value_enum, default_value = "gaussian")]
    kind: DataKind,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Feature dimension (gaussian only).
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
    #[arg(long, default_value_t = 3.0)]
    radius: f64,
    /// Defaults to 1.0 for gaussian and 0.35 for glyphs.
    #[arg(long)]
    noise: Option<f64>,
    /// Image side length (glyphs only).
    #[arg(long, default_value_t = 12)]
    side: usize,
    #[arg(long, default_value_t = 3)]
    strokes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { common, scheme } => {
            let mut m = common.resolve()?;
            m.schemes = vec![scheme.unwrap_or(m.scheme_config.scheme)];
            m.seeds = vec![m.scheme_config.seed];
            m.task_counts = vec![m.benchmark.num_tasks];
            let out = sweep(&m, &common.out)?;
            check(&out)?;
            let path = &out.manifests[0];
            let manifest: CellManifest = serde_json::from_slice(&fs::read(path)?)
                .map_err(splitbridge::error::Error::from)?;
            for s in &manifest.steps {
                println!(
                    "{}",
                    serde_json::to_string(&s.report).expect("report serializes")
                );
            }
            if let Some(avg) = manifest.average_incremental_accuracy {
                eprintln!("average incremental accuracy {avg:.4}");
            }
            eprintln!("manifest: {}", path.display());
            Ok(())
        }
        Command::Matrix {
            common,
            scheme,
            schemes,
            task_counts,
            seeds,
        } => {
            let mut m = common.resolve()?;
            if let Some(s) = scheme {
                m.schemes = vec![s];
            }
            if let Some(s) = schemes {
                m.schemes = s;
            }
            if let Some(t) = task_counts {
                m.task_counts = t;
            }
            if let Some(s) = seeds {
                m.seeds = s;
            }
            let out = sweep(&m, &common.out)?;
            print!("{}", format_table(&summarize(&out.rows)));
            check(&out)
        }
        Command::Eval {
            checkpoint,
            config,
            preset,
            seed,
            tasks,
            step,
        } => {
            let mut m = config::load(preset, config.as_deref())?;
            if let Some(n) = tasks {
                m.benchmark.num_tasks = n;
            }
            let seq = m.benchmark.build(seed)?;
            let net = read_checkpoint(File::open(&checkpoint)?)?;
            let step = match step {
                Some(s) => s,
                None => seq
                    .tasks
                    .iter()
                    .position(|t| t.classes.end() == net.num_classes())
                    .map(|i| i + 1)
                    .ok_or_else(|| {
                        CliError::Invalid(format!(
                            "checkpoint has {} outputs, which matches no task boundary; pass --step",
                            net.num_classes()
                        ))
                    })?,
            };
            let report = evaluate(&net, &seq, step)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            Ok(())
        }
        Command::GenData(g) => gen_data(&g),
        Command::ReplicateTable1 { common, seeds } => {
            let mut m = common.resolve()?;
            m.schemes = vec![Scheme::CeOnly, Scheme::Std];
            if common.tasks.is_none() {
                m.benchmark.num_tasks = 2;
                m.task_counts = vec![2];
            }
            if common.seed.is_none() {
                m.seeds = seeds;
            }
            let out = sweep(&m, &common.out)?;
            check(&out)?;
            print!("{}", ablation_table(&out.rows, m.task_counts[0]));
            Ok(())
        }
    }
}

/// Runs the matrix and reports failed cells on stderr.
fn sweep(m: &ExperimentMatrix, out_dir: &Path) -> Result<MatrixOutcome, CliError> {
    let cells = m.cells().len();
    if let Ok(w) = std::env::var(WORKERS_ENV) {
        eprintln!("{cells} cells, {WORKERS_ENV}={w}");
    }
    let out = run_matrix(m, out_dir)?;
    for f in &out.failures {
        eprintln!("cell {} failed: {}", f.cell, f.error);
    }
    Ok(out)
}

fn check(out: &MatrixOutcome) -> Result<(), CliError> {
    if out.succeeded() {
        Ok(())
    } else {
        Err(CliError::CellsFailed(
            out.failures.len(),
            out.failures.len() + out.manifests.len(),
        ))
    }
}

type Metric = fn(&MetricRow) -> Option<f64>;

const METRICS: [(&str, Metric); 5] = [
    ("overall", |r| Some(r.report.overall_acc)),
    ("old", |r| r.report.old_acc),
    ("new", |r| Some(r.report.new_acc)),
    ("intra_old", |r| r.report.intra_old_acc),
    ("intra_new", |r| Some(r.report.intra_new_acc)),
];

/// Final-step metrics of both schemes with the seed-paired difference
/// (mean ± standard error).
fn ablation_table(rows: &[MetricRow], step: usize) -> String {
    let last = |scheme: Scheme| -> Vec<&MetricRow> {
        rows.iter()
            .filter(|r| r.scheme == scheme && r.report.step == step)
            .collect()
    };
    let (ce, kd) = (last(Scheme::CeOnly), last(Scheme::Std));
    let fmt =
        |s: Option<Stat>| s.map_or("-".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.std));
    let mut out = format!(
        "{:<10} {:>17} {:>17} {:>17}\n",
        "metric", "ce_only", "kd+ce", "delta (paired se)"
    );
    for (name, get) in METRICS {
        let vals =
            |rs: &[&MetricRow]| Stat::of(&rs.iter().filter_map(|r| get(r)).collect::<Vec<_>>());
        let diffs: Vec<f64> = kd
            .iter()
            .filter_map(|k| {
                let c = ce.iter().find(|c| c.seed == k.seed)?;
                Some(get(k)? - get(c)?)
            })
            .collect();
        let delta = Stat::of(&diffs).map_or("-".to_string(), |d| {
            format!("{:+.4} ± {:.4}", d.mean, d.sem(diffs.len()))
        });
        out.push_str(&format!(
            "{:<10} {:>17} {:>17} {:>17}\n",
            name,
            fmt(vals(&ce)),
            fmt(vals(&kd)),
            delta
        ));
    }
    out.push_str(&format!("({} seeds, after task {step})\n", kd.len()));
    out
}

fn gen_data(g: &GenData) -> Result<(), CliError> {
    fs::create_dir_all(&g.out)?;
    match g.kind {
        DataKind::Gaussian => {
            let (train, test) = gen_synthetic(&GaussianSpec {
                num_classes: g.classes,
                feature_dim: g.dim,
                train_per_class: g.train_per_class,
                test_per_class: g.test_per_class,
                radius: g.radius,
                noise_std: g.noise.unwrap_or(1.0),
                seed: g.seed,
            })?;
            save_csv(&train, g.out.join("train.csv"))?;
            save_csv(&test, g.out.join("test.csv"))?;
        }
        DataKind::Glyphs => {
            if g.classes > 256 {
                return Err(CliError::Invalid(
                    "IDX labels hold at most 256 classes".into(),
                ));
            }
            let (train, test) = gen_glyphs(&GlyphSpec {
                num_classes: g.classes,
                side: g.side,
                strokes: g.strokes,
                train_per_class: g.train_per_class,
                test_per_class: g.test_per_class,
                noise_std: g.noise.unwrap_or(GlyphSpec::default().noise_std),
                seed: g.seed,
            })?;
            write_idx(
                &train,
                g.out.join("train-images.idx3-ubyte"),
                g.out.join("train-labels.idx1-ubyte"),
            )?;
            write_idx(
                &test,
                g.out.join("test-images.idx3-ubyte"),
                g.out.join("test-labels.idx1-ubyte"),
            )?;
        }
    }
    eprintln!("wrote {}", g.out.display());
    Ok(())
}
