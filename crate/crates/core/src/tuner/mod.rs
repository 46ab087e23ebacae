//! Training under a composite objective: task loss, distillation terms
//! against a frozen teacher, and weight or feature regularizers.

pub mod data;
pub mod losses;
pub mod optim;
pub mod spec;
pub mod train;

pub use data::{blobs, blobs_shifted, load_csv, load_idx, moons, tokens, Dataset, Split};
pub use optim::{Optimizer, Schedule};
pub use spec::{LossKind, LossSpec, RegKind, RegSpec, Term, TrainConfig};
pub use train::{accuracy, train, EpochRecord, TrainOutcome};
