pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod memory;
pub mod metrics;
pub mod nets;
pub mod patch;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{BlockTarget, Graph, Var};
pub use tensor::{Element, Tensor};
