//! Datasets, benchmark generators and loaders, and task splitting.

mod csv_io;
mod dataset;
pub mod idx;
mod synthetic;
mod tasks;

pub use csv_io::{load_csv, read_csv, save_csv, write_csv};
pub use dataset::{LabeledDataset, Split};
pub use idx::{load_idx, parse_idx, write_idx};
pub use synthetic::{
    gen_glyphs, gen_synthetic, images_to_dataset, GaussianSpec, GlyphSpec, ImageSet,
};
pub use tasks::{split_tasks, BenchmarkSpec, DataSource, Task, TaskSequence};

#[cfg(test)]
mod tests;
