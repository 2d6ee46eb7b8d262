use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::idx::{load_idx, parse_idx};
use super::synthetic::{gen_glyphs, gen_synthetic, images_to_dataset, GaussianSpec, GlyphSpec};
use super::{load_csv, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::losses::TaskRange;
use crate::seed::derive_seed;

/// One incremental task: a contiguous block of (remapped) class indices with
/// its train and test samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub classes: TaskRange,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
    /// `class_map[remapped] = original` class index.
    pub class_map: Vec<usize>,
}

impl TaskSequence {
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.tasks.iter().enumerate() {
            for b in &self.tasks[i + 1..] {
                if a.classes.overlaps(&b.classes) {
                    return Err(Error::invalid("task class sets overlap"));
                }
            }
            for ds in [&a.train, &a.test] {
                if ds.labels().iter().any(|&y| !a.classes.contains(y)) {
                    return Err(Error::invalid(format!(
                        "task {} holds a foreign label",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.classes.len()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.train.dim())
    }
}

/// Permutes the classes (identity when `seed` is `None`), chunks them into
/// `num_tasks` equal groups and relabels so that task `t` owns the `t`-th
/// contiguous block of class indices.
pub fn split_tasks(
    train: &LabeledDataset,
    test: &LabeledDataset,
    num_tasks: usize,
    seed: Option<u64>,
) -> Result<TaskSequence> {
    let n = train.num_classes();
    if test.num_classes() != n {
        return Err(Error::shape("test class count", n, test.num_classes()));
    }
    if num_tasks == 0 || !n.is_multiple_of(num_tasks) {
        return Err(Error::invalid(format!(
            "{n} classes cannot be divided into {num_tasks} equal tasks"
        )));
    }
    let mut class_map: Vec<usize> = (0..n).collect();
    if let Some(seed) = seed {
        class_map.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut remap = vec![0; n];
    for (new, &orig) in class_map.iter().enumerate() {
        remap[orig] = new;
    }
    let train = train.relabel(&remap, n)?;
    let test = test.relabel(&remap, n)?;
    let per_task = n / num_tasks;
    let tasks = (0..num_tasks)
        .map(|t| {
            let classes = TaskRange::new(t * per_task, (t + 1) * per_task)?;
            Ok(Task {
                classes,
                train: train.filter_classes(|y| classes.contains(y)),
                test: test.filter_classes(|y| classes.contains(y)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSequence { tasks, class_map })
}

/// Where benchmark samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Gaussian clusters in `feature_dim` dimensions.
    Gaussian {
        radius: f64,
        noise_std: f64,
    },
    /// Procedural `side x side` images round-tripped through the IDX codec.
    Glyphs {
        side: usize,
        strokes: usize,
        noise_std: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub source: DataSource,
    pub num_classes: usize,
    pub num_tasks: usize,
    /// Used by the Gaussian source only.
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Seed for generated data; `None` derives it from the run seed.
    pub data_seed: Option<u64>,
    /// Seed for the class arrangement; `None` derives it from the run seed.
    pub class_order_seed: Option<u64>,
    /// Keep classes in their original order instead of permuting them.
    pub identity_order: bool,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            source: DataSource::Gaussian {
                radius: 3.0,
                noise_std: 1.0,
            },
            num_classes: 8,
            num_tasks: 2,
            feature_dim: 16,
            train_per_class: 200,
            test_per_class: 100,
            data_seed: None,
            class_order_seed: None,
            identity_order: false,
        }
    }
}

impl BenchmarkSpec {
    /// The 10-class small-image benchmark in five 2-class tasks.
    pub fn glyphs() -> Self {
        let g = GlyphSpec::default();
        BenchmarkSpec {
            source: DataSource::Glyphs {
                side: g.side,
                strokes: g.strokes,
                noise_std: g.noise_std,
            },
            num_classes: g.num_classes,
            num_tasks: 5,
            feature_dim: g.side * g.side,
            train_per_class: g.train_per_class,
            test_per_class: g.test_per_class,
            ..BenchmarkSpec::default()
        }
    }

    pub fn classes_per_task(&self) -> usize {
        self.num_classes / self.num_tasks.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || !self.num_classes.is_multiple_of(self.num_tasks) {
            return Err(Error::invalid(format!(
                "num_classes {} is not a multiple of num_tasks {}",
                self.num_classes, self.num_tasks
            )));
        }
        Ok(())
    }

    /// Loads or generates the train and test sets.
    pub fn load_data(&self, run_seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        let data_seed = self
            .data_seed
            .unwrap_or_else(|| derive_seed(run_seed, &[0x6461_7461]));
        match &self.source {
            DataSource::Gaussian { radius, noise_std } => gen_synthetic(&GaussianSpec {
                num_classes: self.num_classes,
                feature_dim: self.feature_dim,
                train_per_class: self.train_per_class,
                test_per_class: self.test_per_class,
                radius: *radius,
                noise_std: *noise_std,
                seed: data_seed,
            }),
            DataSource::Glyphs {
                side,
                strokes,
                noise_std,
            } => {
                let (train, test) = gen_glyphs(&GlyphSpec {
                    num_classes: self.num_classes,
                    side: *side,
                    strokes: *strokes,
                    train_per_class: self.train_per_class,
                    test_per_class: self.test_per_class,
                    noise_std: *noise_std,
                    seed: data_seed,
                })?;
                let decode = |set, split| {
                    let (i, l) = super::idx::encode_idx(set);
                    images_to_dataset(&parse_idx(&i, &l)?, self.num_classes, split)
                };
                Ok((decode(&train, Split::Train)?, decode(&test, Split::Test)?))
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(train_images, train_labels)?;
                let mut test = load_idx(test_images, test_labels)?;
                test.split = Split::Test;
                let fix = |ds: LabeledDataset| {
                    let (samples, labels, split) =
                        (ds.samples().clone(), ds.labels().to_vec(), ds.split);
                    LabeledDataset::new(samples, labels, self.num_classes, split)
                };
                Ok((fix(train)?, fix(test)?))
            }
            DataSource::Csv { train, test } => Ok((
                load_csv(train, Some(self.num_classes), Split::Train)?,
                load_csv(test, Some(self.num_classes), Split::Test)?,
            )),
        }
    }

    /// Data plus class arrangement for one run.
    pub fn build(&self, run_seed: u64) -> Result<TaskSequence> {
        self.validate()?;
        let (train, test) = self.load_data(run_seed)?;
        let order = if self.identity_order {
            None
        } else {
            Some(
                self.class_order_seed
                    .unwrap_or_else(|| derive_seed(run_seed, &[0x6f72_6465])),
            )
        };
        split_tasks(&train, &test, self.num_tasks, order)
    }
}
