//! Recurrent fully-convolutional networks (RFCN) and their slice-independent
//! FCN baseline for segmenting the left ventricle in short-axis MR stacks.

pub mod data;
pub mod gradcheck;
pub mod layers;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use data::{Phase, SliceStack};
pub use layers::Mode;
pub use mask::Mask;
pub use metrics::MetricReport;
pub use model::{ModelSpec, Network, ParameterSet, Variant};
pub use optim::{Hyperparams, OptimizerKind, OptimizerState};
pub use tensor::{Tape, Tensor, Var};
pub use train::{TrainConfig, TrainOutcome};
