pub mod attention;
pub mod drmlp;
pub mod error;
pub mod layers;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
