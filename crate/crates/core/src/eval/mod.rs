//! Accuracy metrics and the experiment-matrix runner.

mod matrix;
mod metrics;

pub use matrix::{
    format_table, read_jsonl, run_cell, run_matrix, summarize, write_atomic, write_jsonl,
    write_summary_csv, Cell, CellFailure, CellManifest, ExperimentMatrix, MatrixOutcome, MetricRow,
    Stat, StepManifest, SummaryRow, SUMMARY_HEADER, WORKERS_ENV,
};
pub use metrics::{average_incremental_accuracy, evaluate, evaluate_logits, EvalReport};
