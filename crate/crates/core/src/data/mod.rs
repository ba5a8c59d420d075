//! Datasets, file loaders and the reshuffle batch scheduler.

mod dataset;
pub mod io;
mod sampler;

pub use dataset::{
    make_synthetic, regression_teacher, teacher_predict, Dataset, SyntheticKind, Task,
};
pub use io::{load_csv, load_idx, read_idx, IdxArray};
pub use sampler::{epoch_permutation, BatchPlan, ReshuffleSampler};
