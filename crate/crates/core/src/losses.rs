//! Classification and distillation objectives. Every loss is averaged over
//! the batch and returns its gradient with respect to the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{DenseNet, GradientSet, Matrix};
use crate::partition::{cross_groups, PartitionPlan};

/// Floor applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;
/// Group norms below this are treated as zero when differentiating.
pub const NORM_EPS: f64 = 1e-8;

/// Contiguous window of class indices `start..end` (0-based, end exclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskRange {
    start: usize,
    end: usize,
}

impl TaskRange {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if end <= start {
            return Err(Error::invalid(format!("empty class range {start}..{end}")));
        }
        Ok(TaskRange { start, end })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, class: usize) -> bool {
        (self.start..self.end).contains(&class)
    }

    pub fn iter(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn overlaps(&self, other: &TaskRange) -> bool {
        self.start < other.end && other.start < self.end
    }

    fn check_within(&self, width: usize) -> Result<()> {
        if self.end > width {
            return Err(Error::shape(
                "class range",
                format!("end <= {width}"),
                self.end,
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_logits: Matrix,
}

/// Tempered teacher probabilities, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabels {
    pub probs: Matrix,
    pub temperature: f64,
}

impl SoftLabels {
    /// Applies a tempered softmax to each row of `logits`.
    pub fn from_logits(logits: &Matrix, temperature: f64) -> Result<Self> {
        let mut probs = Matrix::zeros(logits.rows(), logits.cols());
        for r in 0..logits.rows() {
            let p = softmax(logits.row(r), temperature)?;
            probs.row_mut(r).copy_from_slice(&p);
        }
        Ok(SoftLabels { probs, temperature })
    }

    pub fn select_rows(&self, idx: &[usize]) -> SoftLabels {
        SoftLabels {
            probs: self.probs.select_rows(idx),
            temperature: self.temperature,
        }
    }
}

/// Tempered softmax, stabilised by subtracting the maximum logit.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty logit vector"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, temperature, &mut out);
    Ok(out)
}

fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[inline]
fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::shape("labels", logits.rows(), labels.len()));
    }
    if logits.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    Ok(())
}

/// Cross entropy over all logits against hard labels.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<LossValue> {
    check_labels(logits, labels)?;
    let width = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= width) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {width} classes"
        )));
    }
    let range = TaskRange::new(0, width)?;
    Ok(local_ce(logits, labels, range))
}

/// Cross entropy with the softmax restricted to `range`; logits outside the
/// range neither affect the value nor receive gradient.
pub fn lce_loss(logits: &Matrix, labels: &[usize], range: TaskRange) -> Result<LossValue> {
    check_labels(logits, labels)?;
    range.check_within(logits.cols())?;
    if let Some(&bad) = labels.iter().find(|&&y| !range.contains(y)) {
        return Err(Error::invalid(format!(
            "label {bad} outside the local class range {}..{}",
            range.start, range.end
        )));
    }
    Ok(local_ce(logits, labels, range))
}

fn local_ce(logits: &Matrix, labels: &[usize], range: TaskRange) -> LossValue {
    let batch = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut p = vec![0.0; range.len()];
    let mut value = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        softmax_into(&logits.row(r)[range.start..range.end], 1.0, &mut p);
        value -= clamped_ln(p[y - range.start]);
        let g = &mut grad.row_mut(r)[range.start..range.end];
        for (gi, pi) in g.iter_mut().zip(&p) {
            *gi = pi / batch;
        }
        g[y - range.start] -= 1.0 / batch;
    }
    LossValue {
        value: value / batch,
        grad_logits: grad,
    }
}

/// Distillation loss `-sum q_hat log q` between the teacher's tempered
/// probabilities and the student's tempered softmax over `range`.
/// The gradient is `(q - q_hat) / tau` per sample, without `tau^2` rescaling.
pub fn kd_loss(
    student_logits: &Matrix,
    teacher: &SoftLabels,
    range: TaskRange,
) -> Result<LossValue> {
    let rows = student_logits.rows();
    if rows == 0 {
        return Err(Error::invalid("empty batch"));
    }
    range.check_within(student_logits.cols())?;
    if teacher.probs.cols() != range.len() {
        return Err(Error::shape(
            "teacher soft labels width vs class range",
            range.len(),
            teacher.probs.cols(),
        ));
    }
    if teacher.probs.rows() != rows {
        return Err(Error::shape(
            "teacher soft labels rows",
            rows,
            teacher.probs.rows(),
        ));
    }
    let tau = teacher.temperature;
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let batch = rows as f64;
    let mut grad = Matrix::zeros(rows, student_logits.cols());
    let mut q = vec![0.0; range.len()];
    let mut value = 0.0;
    for r in 0..rows {
        softmax_into(&student_logits.row(r)[range.start..range.end], tau, &mut q);
        let target = teacher.probs.row(r);
        let g = &mut grad.row_mut(r)[range.start..range.end];
        for ((gi, qi), ti) in g.iter_mut().zip(&q).zip(target) {
            value -= ti * clamped_ln(*qi);
            *gi = (qi - ti) / (tau * batch);
        }
    }
    Ok(LossValue {
        value: value / batch,
        grad_logits: grad,
    })
}

/// `lambda * KD + (1 - lambda) * CE`, distilling over the teacher's classes
/// (the leading `teacher.probs.cols()` logits).
pub fn std_composite_loss(
    logits: &Matrix,
    labels: &[usize],
    teacher: &SoftLabels,
    lambda: f64,
) -> Result<LossValue> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let ce = ce_loss(logits, labels)?;
    let kd = kd_loss(logits, teacher, TaskRange::new(0, teacher.probs.cols())?)?;
    Ok(mix(lambda, &kd, &ce))
}

/// `lambda * a + (1 - lambda) * b` for values and gradients.
pub(crate) fn mix(lambda: f64, a: &LossValue, b: &LossValue) -> LossValue {
    let mut grad = b.grad_logits.clone();
    for (g, (ga, gb)) in grad.as_mut_slice().iter_mut().zip(
        a.grad_logits
            .as_slice()
            .iter()
            .zip(b.grad_logits.as_slice()),
    ) {
        *g = lambda * ga + (1.0 - lambda) * gb;
    }
    LossValue {
        value: lambda * a.value + (1.0 - lambda) * b.value,
        grad_logits: grad,
    }
}

/// Default KD/CE balance `C_old / (C_old + C_new)`.
pub fn lambda_schedule(c_old: usize, c_new: usize) -> Result<f64> {
    if c_old + c_new == 0 {
        return Err(Error::invalid("lambda_schedule needs at least one class"));
    }
    Ok(c_old as f64 / (c_old + c_new) as f64)
}

/// Group-sparsity penalty on the weights connecting old and new partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyValue {
    pub value: f64,
    pub grads: GradientSet,
}

/// `gamma * sum_l (||W_on||_F + ||W_no||_F)` over the plan's cross groups.
/// The gradient of each group is `gamma * W / max(||W||_F, NORM_EPS)`.
pub fn sparsify_penalty(net: &DenseNet, plan: &PartitionPlan, gamma: f64) -> Result<PenaltyValue> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!(
            "gamma must be non-negative, got {gamma}"
        )));
    }
    let groups = cross_groups(plan, net)?;
    let mut grads = GradientSet::zeros_like(net);
    let mut value = 0.0;
    for block in groups.blocks() {
        let w = &net.layers()[block.layer].weight;
        let norm = block.norm(w);
        value += gamma * norm;
        let scale = gamma / norm.max(NORM_EPS);
        let g = &mut grads.layers[block.layer].weight;
        for j in block.outputs.clone() {
            for i in block.inputs.clone() {
                g.set(j, i, scale * w.get(j, i));
            }
        }
    }
    Ok(PenaltyValue { value, grads })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_logits(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-3.0..3.0))
                .collect(),
        )
        .unwrap()
    }

    fn fd_check(logits: &Matrix, grad: &Matrix, f: impl Fn(&Matrix) -> f64) {
        let h = 1e-5;
        for k in 0..logits.as_slice().len() {
            let mut plus = logits.clone();
            plus.as_mut_slice()[k] += h;
            let mut minus = logits.clone();
            minus.as_mut_slice()[k] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let an = grad.as_slice()[k];
            let err = (fd - an).abs();
            assert!(
                err < 1e-10 || err / fd.abs().max(an.abs()) < 1e-6,
                "entry {k}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0], 3.7).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2.0, 0.0], 2.0).unwrap();
        // 1 / (1 + e^-1)
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        let shifted = softmax(&[102.0, 100.0], 2.0).unwrap();
        for (a, b) in p.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(softmax(&[], 1.0).is_err());
        assert!(softmax(&[1.0], 0.0).is_err());
    }

    #[test]
    fn ce_examples() {
        let perfect = Matrix::from_rows(&[[1000.0, 0.0]]).unwrap();
        assert!(ce_loss(&perfect, &[0]).unwrap().value.abs() < 1e-12);
        let flat = Matrix::zeros(3, 4);
        let v = ce_loss(&flat, &[0, 2, 3]).unwrap().value;
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!(ce_loss(&flat, &[0, 4, 1]).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let logits = random_logits(&mut rng, 3, 5);
            let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
            let g = ce_loss(&logits, &labels).unwrap().grad_logits;
            fd_check(&logits, &g, |l| ce_loss(l, &labels).unwrap().value);
        }
    }

    #[test]
    fn kd_uniform_teacher_equal_logits_is_ln2() {
        let teacher = SoftLabels {
            probs: Matrix::filled(2, 2, 0.5),
            temperature: 2.0,
        };
        let logits = Matrix::from_rows(&[[1.0, 1.0, 7.0], [-2.0, -2.0, 0.0]]).unwrap();
        let l = kd_loss(&logits, &teacher, TaskRange::new(0, 2).unwrap()).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);
        assert_eq!(l.grad_logits.get(0, 2), 0.0);
        assert_eq!(l.grad_logits.get(1, 2), 0.0);
    }

    #[test]
    fn kd_rejects_width_mismatch() {
        let teacher = SoftLabels {
            probs: Matrix::filled(1, 3, 1.0 / 3.0),
            temperature: 2.0,
        };
        let logits = Matrix::zeros(1, 4);
        assert!(kd_loss(&logits, &teacher, TaskRange::new(0, 2).unwrap()).is_err());
    }

    #[test]
    fn kd_descent_reaches_teacher_entropy() {
        let target = vec![0.6, 0.3, 0.1];
        let entropy: f64 = -target.iter().map(|p: &f64| p * p.ln()).sum::<f64>();
        let teacher = SoftLabels {
            probs: Matrix::from_rows(std::slice::from_ref(&target)).unwrap(),
            temperature: 2.0,
        };
        let range = TaskRange::new(0, 3).unwrap();
        let mut logits = Matrix::zeros(1, 3);
        for _ in 0..20_000 {
            let l = kd_loss(&logits, &teacher, range).unwrap();
            assert!(l.value >= entropy - 1e-12);
            for (z, g) in logits
                .as_mut_slice()
                .iter_mut()
                .zip(l.grad_logits.as_slice())
            {
                *z -= 2.0 * g;
            }
        }
        let l = kd_loss(&logits, &teacher, range).unwrap();
        assert!((l.value - entropy).abs() < 1e-9);
        let q = softmax(logits.row(0), 2.0).unwrap();
        for (a, b) in q.iter().zip(&target) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn lce_ignores_logits_outside_range() {
        let logits = Matrix::from_rows(&[[9.0, 9.0, 1.0, 1.0]]).unwrap();
        let range = TaskRange::new(2, 4).unwrap();
        let l = lce_loss(&logits, &[2], range).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);
        assert_eq!(l.grad_logits.get(0, 0), 0.0);
        assert_eq!(l.grad_logits.get(0, 1), 0.0);
        assert!(lce_loss(&logits, &[1], range).is_err());
    }

    #[test]
    fn lce_equals_ce_on_sliced_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let logits = random_logits(&mut rng, 4, 7);
            let range = TaskRange::new(3, 7).unwrap();
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(3..7)).collect();
            let local: Vec<usize> = labels.iter().map(|y| y - 3).collect();
            let a = lce_loss(&logits, &labels, range).unwrap();
            let b = ce_loss(&logits.slice_cols(3, 7), &local).unwrap();
            assert!((a.value - b.value).abs() < 1e-12);
            assert!(a
                .grad_logits
                .slice_cols(3, 7)
                .as_slice()
                .iter()
                .zip(b.grad_logits.as_slice())
                .all(|(x, y)| (x - y).abs() < 1e-15));
        }
    }

    #[test]
    fn composite_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random_logits(&mut rng, 3, 5);
        let labels = [0, 3, 4];
        let teacher = SoftLabels::from_logits(&random_logits(&mut rng, 3, 2), 2.0).unwrap();
        let ce = ce_loss(&logits, &labels).unwrap();
        let kd = kd_loss(&logits, &teacher, TaskRange::new(0, 2).unwrap()).unwrap();
        assert_eq!(
            std_composite_loss(&logits, &labels, &teacher, 0.0).unwrap(),
            ce
        );
        assert_eq!(
            std_composite_loss(&logits, &labels, &teacher, 1.0).unwrap(),
            kd
        );
        let mid = std_composite_loss(&logits, &labels, &teacher, 0.5).unwrap();
        assert!((mid.value - 0.5 * (ce.value + kd.value)).abs() < 1e-12);
        assert!(std_composite_loss(&logits, &labels, &teacher, 1.5).is_err());
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_schedule(20, 20).unwrap(), 0.5);
        assert_eq!(lambda_schedule(80, 20).unwrap(), 0.8);
        assert_eq!(lambda_schedule(0, 20).unwrap(), 0.0);
        assert!(lambda_schedule(0, 0).is_err());
    }
}
