use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Feature rows with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    samples: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(
        samples: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if samples.rows() != labels.len() {
            return Err(Error::shape("dataset labels", samples.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} >= num_classes {num_classes}"
            )));
        }
        Ok(LabeledDataset {
            samples,
            labels,
            num_classes,
            split,
        })
    }

    pub fn empty(dim: usize, num_classes: usize, split: Split) -> Self {
        LabeledDataset {
            samples: Matrix::zeros(0, dim),
            labels: Vec::new(),
            num_classes,
            split,
        }
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            samples: self.samples.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Samples whose label satisfies `keep`.
    pub fn filter_classes(&self, keep: impl Fn(usize) -> bool) -> LabeledDataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.select(&idx)
    }

    /// Applies `map[label]` to every label.
    pub fn relabel(&self, map: &[usize], num_classes: usize) -> Result<LabeledDataset> {
        let labels = self
            .labels
            .iter()
            .map(|&y| {
                map.get(y)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("no mapping for label {y}")))
            })
            .collect::<Result<Vec<_>>>()?;
        LabeledDataset::new(self.samples.clone(), labels, num_classes, self.split)
    }

    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if self.dim() != other.dim() && !self.is_empty() && !other.is_empty() {
            return Err(Error::shape("dataset concat", self.dim(), other.dim()));
        }
        let dim = if self.is_empty() {
            other.dim()
        } else {
            self.dim()
        };
        let mut data = Vec::with_capacity((self.len() + other.len()) * dim);
        data.extend_from_slice(self.samples.as_slice());
        data.extend_from_slice(other.samples.as_slice());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        LabeledDataset::new(
            Matrix::from_vec(labels.len(), dim, data)?,
            labels,
            self.num_classes.max(other.num_classes),
            self.split,
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}
