//! Network building blocks: parameters, layers, the conv backbone, growable
//! classifiers and ensembles, and the optimizer.

pub mod checkpoint;
mod layers;
mod model;
mod optim;
mod spec;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use layers::{BatchNorm1d, Block, Conv1d, Init, Linear, Param};
pub use model::{BatchStats, BlockKey, ForwardOptions, ForwardTrace, Model, Sequential};
pub use optim::{Adam, AdamConfig};
pub use spec::{build_backbone, ConvSpec, LayerKind, LayerSpec, NetworkSpec};
