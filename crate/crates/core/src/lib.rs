mod binio;
pub mod consistency;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod segnet;
pub mod stochastic;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
