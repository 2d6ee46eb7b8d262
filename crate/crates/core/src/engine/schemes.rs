use serde::{Deserialize, Serialize};

use super::config::{Scheme, SchemeConfig};
use super::memory::ExemplarMemory;
use super::train::{
    add, cross_task_confusion, masked_lce, train, Batch, PhaseLog, Pool, TeacherSnapshot,
};
use crate::data::{LabeledDataset, Task};
use crate::error::{Error, Result};
use crate::losses::{
    ce_loss, kd_loss, lambda_schedule, mix, sparsify_penalty, std_composite_loss, LossValue,
    SoftLabels, TaskRange,
};
use crate::net::{DenseNet, Matrix, SgdConfig};
use crate::partition::{
    bridge_reconnect, cross_groups, disconnect, extract_subnet, make_plan, CrossGroups,
    PartitionPlan, Side,
};
use crate::seed::derive_seed;

const TAG_FIRST: u64 = 1;
const TAG_SPARSIFY: u64 = 2;
pub(super) const TAG_BRANCHED: u64 = 3;
const TAG_BRIDGE: u64 = 4;
const TAG_STD: u64 = 5;
const TAG_DD_INIT: u64 = 6;
const TAG_DD_NEW: u64 = 7;
const TAG_DD_MERGE: u64 = 8;

pub(super) fn phase_seed(cfg: &SchemeConfig, step: usize, tag: u64, sgd: &SgdConfig) -> u64 {
    derive_seed(cfg.seed, &[step as u64, tag, sgd.seed])
}

/// Number of classes before `task`, checked against the student width.
fn class_split(net: &DenseNet, task: &Task) -> Result<(usize, usize)> {
    let (c_old, c_new) = (task.classes.start(), task.classes.len());
    if net.num_classes() != c_old + c_new {
        return Err(Error::shape(
            "student output width (widen before training)",
            c_old + c_new,
            net.num_classes(),
        ));
    }
    if task.train.is_empty() {
        return Err(Error::invalid("task has no training samples"));
    }
    Ok((c_old, c_new))
}

fn check_teacher(teacher: &TeacherSnapshot, c_old: usize) -> Result<()> {
    let expected = TaskRange::new(0, c_old)?;
    if teacher.classes() != expected {
        return Err(Error::invalid(format!(
            "teacher covers classes {:?}, expected {:?}",
            teacher.classes(),
            expected
        )));
    }
    Ok(())
}

/// KD weight of the composite loss for this scheme.
pub fn effective_lambda(cfg: &SchemeConfig, c_old: usize, c_new: usize) -> Result<f64> {
    match (cfg.scheme, cfg.lambda) {
        (Scheme::CeOnly, _) => Ok(0.0),
        (_, Some(l)) => Ok(l),
        (_, None) => lambda_schedule(c_old, c_new),
    }
}

/// Trains `net` on the first task with plain cross entropy.
pub fn run_first_task(
    mut net: DenseNet,
    d1: &LabeledDataset,
    cfg: &SchemeConfig,
) -> Result<(DenseNet, PhaseLog)> {
    if d1.is_empty() {
        return Err(Error::invalid("first task has no training samples"));
    }
    let pool = Pool::new(d1, None)?;
    let sgd = cfg.phases.first;
    let log = train(
        &mut net,
        &pool,
        &sgd,
        phase_seed(cfg, 1, TAG_FIRST, &sgd),
        &mut |_, b, logits| Ok((ce_loss(logits, &b.labels)?, None)),
    )?;
    Ok((net, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDiagnostics {
    /// Summed cross-partition Frobenius norm when the phase starts.
    pub cross_norm_start: f64,
    /// The same norm right before the cross weights are cut.
    pub cross_norm_at_disconnect: f64,
    /// Largest absolute change of an old-class logit on the training pool
    /// caused by cutting the cross weights.
    pub old_logit_shift: f64,
    pub sparsify: PhaseLog,
    pub branched: PhaseLog,
}

/// Network after the split phase: cross weights masked out.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchedNet {
    pub net: DenseNet,
    pub plan: PartitionPlan,
    pub groups: CrossGroups,
    pub diagnostics: SplitDiagnostics,
}

/// `KD(old block) + LCE(new block, D_t rows only)`.
pub(super) fn kd_lce(
    logits: &Matrix,
    batch: &Batch<'_>,
    soft: &SoftLabels,
    old: TaskRange,
    new: TaskRange,
) -> Result<LossValue> {
    let kd = kd_loss(logits, &soft.select_rows(batch.idx), old)?;
    Ok(add(kd, &masked_lce(logits, batch, new)?))
}

/// Sparsifies the cross-partition weights, cuts them, and trains the two
/// branches separately. `net` must already be widened to the new classes.
pub fn run_split_phase(
    mut net: DenseNet,
    task: &Task,
    memory: &ExemplarMemory,
    teacher: &TeacherSnapshot,
    step: usize,
    cfg: &SchemeConfig,
) -> Result<BranchedNet> {
    let (c_old, c_new) = class_split(&net, task)?;
    if c_old == 0 {
        return Err(Error::invalid(
            "the split phase needs previously learned classes",
        ));
    }
    check_teacher(teacher, c_old)?;
    let old = TaskRange::new(0, c_old)?;
    let plan = make_plan(&net, cfg.split_depth, c_old, c_new, cfg.rho)?;
    let groups = cross_groups(&plan, &net)?;
    let pool = Pool::new(&task.train, Some(memory))?;
    let soft = teacher.soft_labels(pool.data.samples())?;
    let cross_norm_start = groups.total_norm(&net);

    let sgd = cfg.phases.sparsify;
    let gamma = cfg.gamma;
    let sparsify = train(
        &mut net,
        &pool,
        &sgd,
        phase_seed(cfg, step, TAG_SPARSIFY, &sgd),
        &mut |n, b, logits| {
            let mut loss = kd_lce(logits, b, &soft, old, task.classes)?;
            let penalty = sparsify_penalty(n, &plan, gamma)?;
            loss.value += penalty.value;
            Ok((loss, Some(penalty.grads)))
        },
    )?;

    let cross_norm_at_disconnect = groups.total_norm(&net);
    let before = net.forward(pool.data.samples())?;
    disconnect(&mut net, &groups)?;
    let after = net.forward(pool.data.samples())?;
    let mut old_logit_shift = 0.0f64;
    for (a, b) in before.row_iter().zip(after.row_iter()) {
        for k in old.iter() {
            old_logit_shift = old_logit_shift.max((a[k] - b[k]).abs());
        }
    }

    let sgd = cfg.phases.branched;
    let branched = train(
        &mut net,
        &pool,
        &sgd,
        phase_seed(cfg, step, TAG_BRANCHED, &sgd),
        &mut |_, b, logits| Ok((kd_lce(logits, b, &soft, old, task.classes)?, None)),
    )?;

    Ok(BranchedNet {
        net,
        plan,
        groups,
        diagnostics: SplitDiagnostics {
            cross_norm_start,
            cross_norm_at_disconnect,
            old_logit_shift,
            sparsify,
            branched,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeDiagnostics {
    pub lambda: f64,
    /// Fraction of the training pool whose prediction crosses between the
    /// old and new blocks, before and after bridge training.
    pub confusion_start: f64,
    pub confusion_end: f64,
    pub log: PhaseLog,
}

/// Snapshot of the old branch `<trunk, old>` of a disconnected network.
pub fn bridge_teacher(branched: &BranchedNet, cfg: &SchemeConfig) -> Result<TeacherSnapshot> {
    let old = extract_subnet(&branched.net, &branched.plan, Side::Old)?;
    TeacherSnapshot::new(
        old.clone_frozen(),
        cfg.temperature,
        TaskRange::new(0, branched.plan.c_old)?,
    )
}

/// Reconnects the branches through zero-initialised bridge weights and
/// trains the unified network with the composite loss, distilling from the
/// old branch as it was when the phase began.
pub fn run_bridge_phase(
    branched: BranchedNet,
    task: &Task,
    memory: &ExemplarMemory,
    step: usize,
    cfg: &SchemeConfig,
) -> Result<(DenseNet, BridgeDiagnostics)> {
    let teacher = bridge_teacher(&branched, cfg)?;
    let mut net = branched.net;
    bridge_reconnect(&mut net, &branched.groups)?;
    bridge_train(net, &teacher, task, memory, step, cfg)
}

/// Bridge training against an explicit teacher.
pub(crate) fn bridge_train(
    mut net: DenseNet,
    teacher: &TeacherSnapshot,
    task: &Task,
    memory: &ExemplarMemory,
    step: usize,
    cfg: &SchemeConfig,
) -> Result<(DenseNet, BridgeDiagnostics)> {
    let (c_old, c_new) = class_split(&net, task)?;
    check_teacher(teacher, c_old)?;
    let lambda = effective_lambda(cfg, c_old, c_new)?;
    let pool = Pool::new(&task.train, Some(memory))?;
    let soft = teacher.soft_labels(pool.data.samples())?;
    let confusion_start = cross_task_confusion(&net, &pool.data, c_old)?;
    let sgd = cfg.phases.bridge;
    let log = train(
        &mut net,
        &pool,
        &sgd,
        phase_seed(cfg, step, TAG_BRIDGE, &sgd),
        &mut |_, b, logits| {
            Ok((
                std_composite_loss(logits, &b.labels, &soft.select_rows(b.idx), lambda)?,
                None,
            ))
        },
    )?;
    let confusion_end = cross_task_confusion(&net, &pool.data, c_old)?;
    Ok((
        net,
        BridgeDiagnostics {
            lambda,
            confusion_start,
            confusion_end,
            log,
        },
    ))
}

/// Single-phase `lambda * KD + (1 - lambda) * CE` over `D_t ∪ M_t`; the
/// CE-only scheme is the `lambda = 0` case. `net` must already be widened.
pub fn run_std_step(
    mut net: DenseNet,
    task: &Task,
    memory: &ExemplarMemory,
    teacher: &TeacherSnapshot,
    step: usize,
    cfg: &SchemeConfig,
) -> Result<(DenseNet, PhaseLog)> {
    let (c_old, c_new) = class_split(&net, task)?;
    check_teacher(teacher, c_old)?;
    let lambda = effective_lambda(cfg, c_old, c_new)?;
    let pool = Pool::new(&task.train, Some(memory))?;
    let soft = teacher.soft_labels(pool.data.samples())?;
    let sgd = cfg.phases.std;
    let log = train(
        &mut net,
        &pool,
        &sgd,
        phase_seed(cfg, step, TAG_STD, &sgd),
        &mut |_, b, logits| {
            Ok((
                std_composite_loss(logits, &b.labels, &soft.select_rows(b.idx), lambda)?,
                None,
            ))
        },
    )?;
    Ok((net, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdDiagnostics {
    pub lambda: f64,
    pub new_net: PhaseLog,
    pub merge: PhaseLog,
}

/// Trains a fresh network on `D_t` alone (labels shifted to `0..C_new`) and
/// freezes it as the teacher of the new class block.
pub fn dd_new_teacher(
    task: &Task,
    step: usize,
    cfg: &SchemeConfig,
) -> Result<(TeacherSnapshot, PhaseLog)> {
    if task.train.is_empty() {
        return Err(Error::invalid("task has no training samples"));
    }
    let range = task.classes;
    let shift: Vec<usize> = task
        .train
        .labels()
        .iter()
        .map(|&y| y - range.start())
        .collect();
    let local = LabeledDataset::new(
        task.train.samples().clone(),
        shift,
        range.len(),
        task.train.split,
    )?;
    let init = DenseNet::mlp(
        local.dim(),
        &cfg.hidden,
        range.len(),
        derive_seed(cfg.seed, &[step as u64, TAG_DD_INIT]),
    )?;
    let mut net = init;
    let pool = Pool::new(&local, None)?;
    let sgd = cfg.phases.dd_new;
    let log = train(
        &mut net,
        &pool,
        &sgd,
        phase_seed(cfg, step, TAG_DD_NEW, &sgd),
        &mut |_, b, logits| Ok((ce_loss(logits, &b.labels)?, None)),
    )?;
    Ok((
        TeacherSnapshot::new(net.clone_frozen(), cfg.temperature, range)?,
        log,
    ))
}

/// Double distillation: `lambda * (KD_old + KD_new) / 2 + (1 - lambda) * CE`
/// on the widened previous network. The separate new-task network lives
/// only for the duration of this call.
pub fn run_dd_step(
    prev: &DenseNet,
    task: &Task,
    memory: &ExemplarMemory,
    teacher: &TeacherSnapshot,
    step: usize,
    cfg: &SchemeConfig,
) -> Result<(DenseNet, DdDiagnostics)> {
    let mut net = prev.clone();
    net.widen_output(task.classes.len());
    let (c_old, c_new) = class_split(&net, task)?;
    check_teacher(teacher, c_old)?;
    let lambda = effective_lambda(cfg, c_old, c_new)?;
    let (new_teacher, new_log) = dd_new_teacher(task, step, cfg)?;
    let pool = Pool::new(&task.train, Some(memory))?;
    let soft_old = teacher.soft_labels(pool.data.samples())?;
    let soft_new = new_teacher.soft_labels(pool.data.samples())?;
    drop(new_teacher);
    let old = TaskRange::new(0, c_old)?;
    let sgd = cfg.phases.dd_merge;
    let merge = train(
        &mut net,
        &pool,
        &sgd,
        phase_seed(cfg, step, TAG_DD_MERGE, &sgd),
        &mut |_, b, logits| {
            let kd_old = kd_loss(logits, &soft_old.select_rows(b.idx), old)?;
            let kd_new = kd_loss(logits, &soft_new.select_rows(b.idx), task.classes)?;
            let kd = mix(0.5, &kd_old, &kd_new);
            Ok((mix(lambda, &kd, &ce_loss(logits, &b.labels)?), None))
        },
    )?;
    Ok((
        net,
        DdDiagnostics {
            lambda,
            new_net: new_log,
            merge,
        },
    ))
}
