use serde::{Deserialize, Serialize};

use crate::data::TaskSequence;
use crate::error::{Error, Result};
use crate::losses::TaskRange;
use crate::net::{DenseNet, Matrix};

/// Accuracies after learning task `step` (1-based).
///
/// "Old" pools every class of tasks `1..step`; "new" is task `step`. The
/// intra accuracies restrict the argmax to the logits of the sample's own
/// block. At step 1 there is no old block and the old fields are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    pub overall_acc: f64,
    pub old_acc: Option<f64>,
    pub new_acc: f64,
    pub intra_old_acc: Option<f64>,
    pub intra_new_acc: f64,
    pub per_task_acc: Vec<f64>,
    pub n_old: usize,
    pub n_new: usize,
    pub correct_old: usize,
    pub correct_new: usize,
    pub correct_intra_old: usize,
    pub correct_intra_new: usize,
    /// Old-task samples whose global argmax lands in the new block.
    pub old_predicted_new: usize,
    /// New-task samples whose global argmax lands in the old block.
    pub new_predicted_old: usize,
}

/// First index of the maximum within `range`.
fn argmax(row: &[f64], range: std::ops::Range<usize>) -> usize {
    let mut best = range.start;
    for i in range {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores raw logits. `tasks` lists the class blocks of tasks `1..=step`.
pub fn evaluate_logits(
    logits: &Matrix,
    labels: &[usize],
    tasks: &[TaskRange],
) -> Result<EvalReport> {
    let Some(new_block) = tasks.last().copied() else {
        return Err(Error::invalid("evaluation needs at least one task"));
    };
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "evaluation labels",
            logits.rows(),
            labels.len(),
        ));
    }
    if logits.cols() < new_block.end() {
        return Err(Error::shape(
            "logit width",
            format!(">= {}", new_block.end()),
            logits.cols(),
        ));
    }
    let old_end = new_block.start();
    let width = logits.cols();
    let mut per_task = vec![(0usize, 0usize); tasks.len()];
    let mut r = EvalReport {
        step: tasks.len(),
        overall_acc: 0.0,
        old_acc: None,
        new_acc: 0.0,
        intra_old_acc: None,
        intra_new_acc: 0.0,
        per_task_acc: Vec::new(),
        n_old: 0,
        n_new: 0,
        correct_old: 0,
        correct_new: 0,
        correct_intra_old: 0,
        correct_intra_new: 0,
        old_predicted_new: 0,
        new_predicted_old: 0,
    };
    for (row, &y) in logits.row_iter().zip(labels) {
        let task = tasks
            .iter()
            .position(|t| t.contains(y))
            .ok_or_else(|| Error::invalid(format!("label {y} belongs to no evaluated task")))?;
        let pred = argmax(row, 0..width);
        let hit = pred == y;
        per_task[task].0 += hit as usize;
        per_task[task].1 += 1;
        if new_block.contains(y) {
            r.n_new += 1;
            r.correct_new += hit as usize;
            r.correct_intra_new += (argmax(row, new_block.iter()) == y) as usize;
            r.new_predicted_old += (pred < old_end) as usize;
        } else {
            r.n_old += 1;
            r.correct_old += hit as usize;
            r.correct_intra_old += (argmax(row, 0..old_end) == y) as usize;
            r.old_predicted_new += new_block.contains(pred) as usize;
        }
    }
    r.overall_acc = ratio(r.correct_old + r.correct_new, r.n_old + r.n_new);
    r.new_acc = ratio(r.correct_new, r.n_new);
    r.intra_new_acc = ratio(r.correct_intra_new, r.n_new);
    if old_end > 0 {
        r.old_acc = Some(ratio(r.correct_old, r.n_old));
        r.intra_old_acc = Some(ratio(r.correct_intra_old, r.n_old));
    }
    r.per_task_acc = per_task.iter().map(|&(c, n)| ratio(c, n)).collect();
    Ok(r)
}

/// Evaluates `net` on the test sets of tasks `1..=step` of `seq`.
pub fn evaluate(net: &DenseNet, seq: &TaskSequence, step: usize) -> Result<EvalReport> {
    if step == 0 || step > seq.len() {
        return Err(Error::invalid(format!(
            "step {step} outside 1..={}",
            seq.len()
        )));
    }
    let tasks = &seq.tasks[..step];
    if let Some(i) = tasks.iter().position(|t| t.test.is_empty()) {
        return Err(Error::invalid(format!(
            "task {} has no test samples",
            i + 1
        )));
    }
    let mut test = tasks[0].test.clone();
    for t in &tasks[1..] {
        test = test.concat(&t.test)?;
    }
    let logits = net.forward(test.samples())?;
    let ranges: Vec<TaskRange> = tasks.iter().map(|t| t.classes).collect();
    evaluate_logits(&logits, test.labels(), &ranges)
}

/// Mean overall accuracy over every step after the first.
pub fn average_incremental_accuracy(reports: &[EvalReport]) -> Result<f64> {
    if reports.len() < 2 {
        return Err(Error::invalid(
            "average incremental accuracy needs at least two steps",
        ));
    }
    let tail = &reports[1..];
    Ok(tail.iter().map(|r| r.overall_acc).sum::<f64>() / tail.len() as f64)
}
