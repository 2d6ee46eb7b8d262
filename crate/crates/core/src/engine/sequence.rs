use serde::{Deserialize, Serialize};

use super::config::{Scheme, SchemeConfig};
use super::memory::{update_exemplars, ExemplarMemory};
use super::schemes::{
    run_bridge_phase, run_dd_step, run_first_task, run_split_phase, run_std_step,
    BridgeDiagnostics, DdDiagnostics, SplitDiagnostics,
};
use super::train::{PhaseLog, TeacherSnapshot};
use crate::data::TaskSequence;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::losses::TaskRange;
use crate::net::DenseNet;
use crate::partition::PartitionPlan;
use crate::seed::derive_seed;

const TAG_INIT: u64 = 0x696e_6974;
const TAG_MEMORY: u64 = 0x6d65_6d6f;

/// Per-step training diagnostics, tagged by the scheme that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepDiagnostics {
    First {
        log: PhaseLog,
    },
    SplitBridge {
        split: SplitDiagnostics,
        bridge: BridgeDiagnostics,
    },
    Std {
        lambda: f64,
        log: PhaseLog,
    },
    Dd(DdDiagnostics),
}

/// Outcome of one incremental step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub net: DenseNet,
    pub report: EvalReport,
    /// Partition used by the split phase (Split-and-Bridge, step >= 2).
    pub plan: Option<PartitionPlan>,
    pub diagnostics: StepDiagnostics,
    /// Exemplars held after the post-step memory update.
    pub memory_len: usize,
}

/// Randomly initialised network sized for the first task.
pub fn initial_net(seq: &TaskSequence, cfg: &SchemeConfig) -> Result<DenseNet> {
    let first = seq
        .tasks
        .first()
        .ok_or_else(|| Error::invalid("task sequence is empty"))?;
    DenseNet::mlp(
        seq.input_dim(),
        &cfg.hidden,
        first.classes.len(),
        derive_seed(cfg.seed, &[TAG_INIT]),
    )
}

/// Learns every task in order with the configured scheme, updating the
/// exemplar memory and evaluating on all seen tasks after each step.
pub fn run_sequence(seq: &TaskSequence, cfg: &SchemeConfig) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    seq.validate()?;
    let mut expected_start = 0;
    for (i, task) in seq.tasks.iter().enumerate() {
        if task.classes.is_empty() || task.classes.start() != expected_start {
            return Err(Error::invalid(format!(
                "task {} must own classes starting at {expected_start}",
                i + 1
            )));
        }
        expected_start = task.classes.end();
    }
    let mut net = initial_net(seq, cfg)?;
    let mut memory = ExemplarMemory::new(cfg.memory_size, seq.input_dim(), seq.num_classes());
    let mut records = Vec::with_capacity(seq.len());
    for (i, task) in seq.tasks.iter().enumerate() {
        let step = i + 1;
        let mut plan = None;
        let diagnostics;
        if step == 1 {
            let (trained, log) = run_first_task(net, &task.train, cfg)?;
            net = trained;
            diagnostics = StepDiagnostics::First { log };
        } else {
            let c_old = task.classes.start();
            let teacher = TeacherSnapshot::new(
                net.clone_frozen(),
                cfg.temperature,
                TaskRange::new(0, c_old)?,
            )?;
            let mut widened = net.clone();
            widened.widen_output(task.classes.len());
            match cfg.scheme {
                Scheme::Sb => {
                    let branched = run_split_phase(widened, task, &memory, &teacher, step, cfg)?;
                    plan = Some(branched.plan.clone());
                    let split = branched.diagnostics.clone();
                    let (trained, bridge) = run_bridge_phase(branched, task, &memory, step, cfg)?;
                    net = trained;
                    diagnostics = StepDiagnostics::SplitBridge { split, bridge };
                }
                Scheme::Std | Scheme::CeOnly => {
                    let lambda = super::schemes::effective_lambda(cfg, c_old, task.classes.len())?;
                    let (trained, log) = run_std_step(widened, task, &memory, &teacher, step, cfg)?;
                    net = trained;
                    diagnostics = StepDiagnostics::Std { lambda, log };
                }
                Scheme::Dd => {
                    let (trained, dd) = run_dd_step(&net, task, &memory, &teacher, step, cfg)?;
                    net = trained;
                    diagnostics = StepDiagnostics::Dd(dd);
                }
            }
        }
        memory = update_exemplars(
            &memory,
            &task.train,
            derive_seed(cfg.seed, &[TAG_MEMORY, step as u64]),
            cfg.balanced_memory,
        )?;
        let report = evaluate(&net, seq, step)?;
        records.push(StepRecord {
            step,
            net: net.clone(),
            report,
            plan,
            diagnostics,
            memory_len: memory.len(),
        });
    }
    Ok(records)
}
