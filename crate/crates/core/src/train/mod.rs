//! Optimization, caching, grid search and sweeps.

pub mod cache;
pub mod experiment;
pub mod harness;
pub mod optim;

pub use cache::{estimate_bytes, CacheLayout, FeatureCache};
pub use experiment::{run_experiment, sweep, Axis, ExperimentConfig, LayerSel, RunOutput, RunRow};
pub use harness::{evaluate, fit, grid_search, predict, split_80_20, GridResult, Hyper};
pub use optim::{cosine_lr, Adam};
