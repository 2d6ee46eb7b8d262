use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::SgdConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Split-and-Bridge.
    Sb,
    /// Single-phase `lambda * KD + (1 - lambda) * CE`.
    Std,
    /// Cross entropy only.
    CeOnly,
    /// Double distillation from the old model and a separately trained new model.
    Dd,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Sb, Scheme::Std, Scheme::CeOnly, Scheme::Dd];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Sb => "sb",
            Scheme::Std => "std",
            Scheme::CeOnly => "ce_only",
            Scheme::Dd => "dd",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sb" | "split_and_bridge" => Ok(Scheme::Sb),
            "std" => Ok(Scheme::Std),
            "ce" | "ce_only" => Ok(Scheme::CeOnly),
            "dd" => Ok(Scheme::Dd),
            other => Err(Error::invalid(format!("unknown scheme `{other}`"))),
        }
    }
}

fn phase(epochs: usize, learning_rate: f64) -> SgdConfig {
    SgdConfig {
        learning_rate,
        epochs,
        ..SgdConfig::default()
    }
}

/// Optimiser settings and epoch budget of every training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    /// Plain CE on the first task.
    pub first: SgdConfig,
    /// Split phase, stage 1: KD + LCE + cross-partition penalty.
    pub sparsify: SgdConfig,
    /// Split phase, stage 2: KD + LCE on the disconnected branches.
    pub branched: SgdConfig,
    /// Bridge phase: composite loss on the reconnected network.
    pub bridge: SgdConfig,
    /// STD and CE-only steps.
    pub std: SgdConfig,
    /// DD: the separate new-task network.
    pub dd_new: SgdConfig,
    /// DD: merging both teachers into the widened network.
    pub dd_merge: SgdConfig,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        PhaseSchedule {
            first: phase(40, 0.02),
            sparsify: phase(120, 0.02),
            branched: phase(40, 0.02),
            bridge: phase(40, 0.02),
            std: phase(200, 0.02),
            dd_new: phase(60, 0.02),
            dd_merge: phase(140, 0.02),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    /// Distillation temperature.
    pub temperature: f64,
    /// Strength of the cross-partition sparsity penalty.
    pub gamma: f64,
    /// Old-task allocation factor of the adaptive split.
    pub rho: f64,
    /// Number of trunk layers shared by both branches.
    pub split_depth: usize,
    pub hidden: Vec<usize>,
    pub memory_size: usize,
    /// Class-balanced exemplar sampling instead of uniform.
    pub balanced_memory: bool,
    /// Fixed KD weight; `None` uses `C_old / (C_old + C_new)`.
    pub lambda: Option<f64>,
    pub phases: PhaseSchedule,
    pub seed: u64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            scheme: Scheme::Sb,
            temperature: 2.0,
            gamma: 1e-2,
            rho: 1.0,
            split_depth: 2,
            hidden: vec![32, 32, 32, 32],
            memory_size: 80,
            balanced_memory: false,
            lambda: None,
            phases: PhaseSchedule::default(),
            seed: 0,
        }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("gamma must be non-negative"));
        }
        if !(self.rho > 0.0) {
            return Err(Error::invalid("rho must be positive"));
        }
        if self.split_depth > self.hidden.len() {
            return Err(Error::invalid(format!(
                "split_depth {} exceeds the {} hidden layers",
                self.split_depth,
                self.hidden.len()
            )));
        }
        if let Some(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::invalid("lambda must lie in [0, 1]"));
            }
        }
        let p = &self.phases;
        for cfg in [
            &p.first,
            &p.sparsify,
            &p.branched,
            &p.bridge,
            &p.std,
            &p.dd_new,
            &p.dd_merge,
        ] {
            cfg.validate()?;
        }
        Ok(())
    }
}
