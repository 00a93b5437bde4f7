//! Two-tower vision-language model whose fusion encoder reads every
//! uni-modal layer through sigmoid-gated bridges, together with pre-training
//! objectives, a training harness, and representation-analysis tools.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod table;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use config::{Config, ModelConfig, Topology, TrainConfig};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::{Gradients, Op, Tape, Tensor};
