//! Model family, parameter naming, checkpoints and forward passes.

pub mod checkpoint;
pub mod forward;
pub mod params;
pub mod path;
pub mod spec;

pub use checkpoint::{Checkpoint, Entry};
pub use forward::{forward, forward_graph, register_params, ActivationTrace, Model, VarMap};
pub use params::{build_model, check_digest, load_checkpoint, save_checkpoint, Init, ParamStore, Trainable};
pub use path::{path, ParamPath, PathPattern};
pub use spec::{Activation, ModelSpec, VitSpec};
