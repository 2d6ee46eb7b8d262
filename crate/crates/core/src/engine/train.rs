use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::memory::ExemplarMemory;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{lce_loss, LossValue, SoftLabels, TaskRange};
use crate::net::{sgd_step, DenseNet, FrozenNet, GradientSet, Matrix, SgdConfig, Velocity};

/// Frozen reference model for distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSnapshot {
    net: FrozenNet,
    temperature: f64,
    classes: TaskRange,
}

impl TeacherSnapshot {
    /// `classes` is the student logit block the teacher's outputs map onto.
    pub fn new(net: FrozenNet, temperature: f64, classes: TaskRange) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::invalid("teacher temperature must be positive"));
        }
        if net.net().num_classes() != classes.len() {
            return Err(Error::shape(
                "teacher output width",
                classes.len(),
                net.net().num_classes(),
            ));
        }
        Ok(TeacherSnapshot {
            net,
            temperature,
            classes,
        })
    }

    pub fn net(&self) -> &DenseNet {
        self.net.net()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn classes(&self) -> TaskRange {
        self.classes
    }

    pub fn soft_labels(&self, x: &Matrix) -> Result<SoftLabels> {
        SoftLabels::from_logits(&self.net.forward(x)?, self.temperature)
    }
}

/// Training pool `D_t ∪ M_t`; `current[i]` marks members of `D_t`.
#[derive(Clone, Debug)]
pub(crate) struct Pool {
    pub data: LabeledDataset,
    pub current: Vec<bool>,
}

impl Pool {
    pub fn new(d_t: &LabeledDataset, memory: Option<&ExemplarMemory>) -> Result<Self> {
        let mut current = vec![true; d_t.len()];
        let data = match memory {
            Some(m) if !m.is_empty() => {
                current.extend(std::iter::repeat_n(false, m.len()));
                d_t.concat(m.items())?
            }
            _ => d_t.clone(),
        };
        Ok(Pool { data, current })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }
}

/// One mini-batch as seen by an objective.
pub(crate) struct Batch<'a> {
    /// Pool indices of the rows.
    pub idx: &'a [usize],
    pub labels: Vec<usize>,
    pub current: Vec<bool>,
}

/// Loss value, logit gradient and optional direct parameter gradient.
pub(crate) type Objective<'o> =
    dyn FnMut(&DenseNet, &Batch<'_>, &Matrix) -> Result<(LossValue, Option<GradientSet>)> + 'o;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub epochs: usize,
    pub steps: usize,
    /// Mean batch loss of the last epoch (NaN when no epoch ran).
    pub final_loss: f64,
}

/// Seeded mini-batch SGD over `pool`. The shuffling stream is private to
/// the phase so phases never perturb each other's randomness.
pub(crate) fn train(
    net: &mut DenseNet,
    pool: &Pool,
    cfg: &SgdConfig,
    seed: u64,
    objective: &mut Objective<'_>,
) -> Result<PhaseLog> {
    cfg.validate()?;
    if pool.len() == 0 {
        return Err(Error::invalid("training pool is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut velocity = Velocity::new(net);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut log = PhaseLog {
        final_loss: f64::NAN,
        ..PhaseLog::default()
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let x = pool.data.samples().select_rows(idx);
            let batch = Batch {
                idx,
                labels: idx.iter().map(|&i| pool.data.labels()[i]).collect(),
                current: idx.iter().map(|&i| pool.current[i]).collect(),
            };
            let trace = net.forward_trace(&x)?;
            let (loss, extra) = objective(net, &batch, trace.logits())?;
            if !loss.value.is_finite() {
                return Err(Error::invalid(
                    "training loss diverged to a non-finite value",
                ));
            }
            let mut grads = net.backward_trace(&trace, &loss.grad_logits)?;
            if let Some(extra) = extra {
                grads.add_scaled(&extra, 1.0);
            }
            sgd_step(net, &grads, cfg, &mut velocity)?;
            total += loss.value;
            batches += 1;
            log.steps += 1;
        }
        log.epochs += 1;
        log.final_loss = total / batches as f64;
    }
    Ok(log)
}

/// LCE over the rows of the batch that belong to `D_t`, scaled to the batch
/// mean of those rows and scattered back to full-batch shape.
pub(crate) fn masked_lce(
    logits: &Matrix,
    batch: &Batch<'_>,
    range: TaskRange,
) -> Result<LossValue> {
    let rows: Vec<usize> = (0..batch.idx.len()).filter(|&r| batch.current[r]).collect();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    if rows.is_empty() {
        return Ok(LossValue {
            value: 0.0,
            grad_logits: grad,
        });
    }
    let labels: Vec<usize> = rows.iter().map(|&r| batch.labels[r]).collect();
    let sub = lce_loss(&logits.select_rows(&rows), &labels, range)?;
    for (k, &r) in rows.iter().enumerate() {
        grad.row_mut(r).copy_from_slice(sub.grad_logits.row(k));
    }
    Ok(LossValue {
        value: sub.value,
        grad_logits: grad,
    })
}

/// Sum of two losses of equal shape.
pub(crate) fn add(a: LossValue, b: &LossValue) -> LossValue {
    let mut out = a;
    out.value += b.value;
    for (g, h) in out
        .grad_logits
        .as_mut_slice()
        .iter_mut()
        .zip(b.grad_logits.as_slice())
    {
        *g += h;
    }
    out
}

/// Fraction of pool samples whose global argmax crosses between the old
/// block `0..old_end` and the rest.
pub(crate) fn cross_task_confusion(
    net: &DenseNet,
    data: &LabeledDataset,
    old_end: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let logits = net.forward(data.samples())?;
    let mut crossed = 0usize;
    for (row, &y) in logits.row_iter().zip(data.labels()) {
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        if (best < old_end) != (y < old_end) {
            crossed += 1;
        }
    }
    Ok(crossed as f64 / data.len() as f64)
}
