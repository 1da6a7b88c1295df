pub mod aggregation;
pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod model;
pub mod profiler;
pub mod selector;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vit;
pub mod vqt;

pub use autodiff::{Category, Graph, NodeId};
pub use model::{Model, ModelSpec, Strategy};
pub use tensor::{Tensor, TensorError};
