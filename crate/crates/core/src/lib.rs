//! Federated learning simulator with cross-client prototype calibration.

pub mod autodiff;
pub mod client;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod prototype;
pub mod seed;
pub mod server;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use autodiff::{Graph, Var};
pub use client::{ClientConfig, GlobalPrototypeSet};
pub use data::{LabeledDataset, PartitionPlan};
pub use model::{ModelConfig, ModelParams, Part};
pub use prototype::{Prototype, PrototypeConfig};
pub use server::{KnowledgeBase, ServerConfig};
pub use sim::{ExperimentConfig, Method};
