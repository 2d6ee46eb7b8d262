use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{LabeledDataset, Split};
use crate::error::Result;

/// Fixed-capacity rehearsal buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarMemory {
    capacity: usize,
    items: LabeledDataset,
}

impl ExemplarMemory {
    pub fn new(capacity: usize, dim: usize, num_classes: usize) -> Self {
        ExemplarMemory {
            capacity,
            items: LabeledDataset::empty(dim, num_classes, Split::Train),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn items(&self) -> &LabeledDataset {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Resamples the memory from `M_t ∪ D_t`: a seeded uniform subset of
/// `capacity` items, or equal per-class quotas when `balanced` is set.
pub fn update_exemplars(
    mem: &ExemplarMemory,
    new_data: &LabeledDataset,
    seed: u64,
    balanced: bool,
) -> Result<ExemplarMemory> {
    let capacity = mem.capacity;
    let pool = mem.items.concat(new_data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = if pool.len() <= capacity {
        (0..pool.len()).collect()
    } else if !balanced {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(capacity);
        idx
    } else {
        balanced_sample(pool.labels(), capacity, &mut rng)
    };
    keep.sort_unstable();
    Ok(ExemplarMemory {
        capacity,
        items: pool.select(&keep),
    })
}

fn balanced_sample(labels: &[usize], capacity: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    for idx in by_class.values_mut() {
        idx.shuffle(rng);
    }
    let quota = capacity / by_class.len();
    let mut taken: Vec<usize> = by_class.values().map(|idx| idx.len().min(quota)).collect();
    let mut left = capacity - taken.iter().sum::<usize>();
    // hand out the remainder one per class, lowest label first
    while left > 0 {
        let mut progressed = false;
        for (k, idx) in by_class.values().enumerate() {
            if left > 0 && taken[k] < idx.len() {
                taken[k] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    by_class
        .values()
        .zip(&taken)
        .flat_map(|(idx, &n)| idx[..n].iter().copied())
        .collect()
}
