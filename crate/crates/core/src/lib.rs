//! Multi-graph convolution networks for 3D human pose forecasting.
//!
//! A sequence of `T` observed poses is mapped to `K` predicted poses through
//! stacks of graph convolutions over a spatio-temporal multi-graph, a
//! sequence-aware attention step and a learned temporal alignment.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layer;
pub mod model;
pub mod optim;
pub mod run;
pub mod tensor;
pub mod train;

pub use attention::{AttentionConfig, Strategy};
pub use config::RunConfig;
pub use data::{skeleton_preset, PoseSequence, SynthConfig, WindowSet};
pub use error::{Error, Result};
pub use graph::{multigraph_for, PartitionedMultiGraph, SkeletonGraph};
pub use model::{ForecastModel, ModelConfig};
pub use optim::{AdamState, ParamSet};
pub use tensor::{Mask, OpKind, Tensor};
pub use train::{EvalReport, TrainConfig, TrainLog};
