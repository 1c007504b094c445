//! Prior-guided hierarchical harmonization network for single image
//! dehazing, on a small CPU tensor engine with reverse-mode autodiff.

pub mod autodiff;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod network;
pub mod objectives;
pub mod params;
pub mod priors;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use network::{build, param_count, ArchConfig, BlockFlags, BottleneckMode, ModelState};
pub use objectives::{LossTerms, LossWeights};
pub use params::ParamStore;
pub use priors::PriorWindow;
pub use tensor::{Padding, Shape, Tensor};
pub use train::{TrainConfig, Trainer};
