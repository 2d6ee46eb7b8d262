//! Experiment config files: JSON deep-merged onto the built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use splitbridge::data::BenchmarkSpec;
use splitbridge::eval::ExperimentMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Malformed JSON; the message carries line and column.
    #[error("{path}: {source}")]
    Syntax {
        path: PathBuf,
        source: serde_json::Error,
    },
    /// Well-formed JSON that does not fit the schema.
    #[error("{path}: field `{field}`: {message}")]
    Field {
        path: PathBuf,
        field: String,
        message: String,
    },
}

/// Benchmark the defaults start from before a config file is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 8 Gaussian classes in 16 dimensions.
    Gaussian,
    /// 10 procedural 12x12 glyph classes in five tasks.
    Glyphs,
}

pub fn defaults(preset: Preset) -> ExperimentMatrix {
    let benchmark = match preset {
        Preset::Gaussian => BenchmarkSpec::default(),
        Preset::Glyphs => BenchmarkSpec::glyphs(),
    };
    ExperimentMatrix {
        task_counts: vec![benchmark.num_tasks],
        benchmark,
        ..ExperimentMatrix::default()
    }
}

/// Recursively overlays `patch` onto `base`. Objects merge key by key;
/// everything else replaces. An object whose `kind` differs from the base's
/// replaces it wholesale, so switching a tagged variant does not inherit
/// fields of the old one.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let switches = matches!((b.get("kind"), p.get("kind")), (Some(x), Some(y)) if x != y);
            if switches {
                *b = p;
                return;
            }
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, patch) => *slot = patch,
    }
}

/// Parses `text` as a partial config over `base`.
pub fn apply(
    base: &ExperimentMatrix,
    text: &str,
    path: &Path,
) -> Result<ExperimentMatrix, ConfigError> {
    let patch: Value = serde_json::from_str(text).map_err(|source| ConfigError::Syntax {
        path: path.to_owned(),
        source,
    })?;
    let mut value = serde_json::to_value(base).expect("defaults serialize");
    merge(&mut value, patch);
    serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Field {
        path: path.to_owned(),
        field: e.path().to_string(),
        message: e.into_inner().to_string(),
    })
}

pub fn load(preset: Preset, path: Option<&Path>) -> Result<ExperimentMatrix, ConfigError> {
    let base = defaults(preset);
    let Some(path) = path else {
        return Ok(base);
    };
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_owned(),
        source,
    })?;
    apply(&base, &text, path)
}
