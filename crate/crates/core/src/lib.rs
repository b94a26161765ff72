pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod fusion;
pub mod graph;
pub mod loss;
pub mod memory;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod render;
pub mod scalar;
pub mod score;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
