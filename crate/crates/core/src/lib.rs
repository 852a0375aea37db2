//! Shifted-window transformer encoder with an adaptive feature fusion
//! decoder for 2D segmentation, plus the losses, metrics, data pipeline and
//! training loop around it.

pub mod autograd;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod window;

pub use ndarray;
pub use autograd::{Graph, ParamId, ParamStore, Var};
pub use config::{Ablation, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::AffSegNet;
pub use tensor::{Element, Tensor};
