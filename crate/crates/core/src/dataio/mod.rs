//! Synthetic data, the on-disk containers and cross-validation splits.

pub mod folds;
pub mod format;
pub mod phantom;
mod sample;

pub use folds::{fold_fingerprint, kfold_split, training_indices};
pub use format::{read_dataset, read_params, write_dataset, write_params};
pub use phantom::{generate_phantom, PhantomConfig};
pub use sample::{presence_from_labels, Sample};
