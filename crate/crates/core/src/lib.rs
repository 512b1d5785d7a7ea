pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod grouping;
pub mod head;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod regularizer;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
