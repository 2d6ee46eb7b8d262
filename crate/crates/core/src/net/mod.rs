//! Dense feed-forward networks with manual backpropagation, connectivity
//! masks and momentum SGD.

mod checkpoint;
mod dense;
mod matrix;
mod sgd;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dense::{Activation, DenseNet, FrozenNet, GradientSet, Layer, LayerGrad, LayerSpec, Trace};
pub use matrix::Matrix;
pub use sgd::{sgd_step, SgdConfig, Velocity};
