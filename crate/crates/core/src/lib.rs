pub mod arch;
pub mod check;
pub mod error;
pub mod module;
pub mod norm;
pub mod optim;
pub mod sharpness;
pub mod tensor;

pub use error::{Error, Result};
pub use module::{Module, Value, WeightVector};
pub use tensor::Tensor;
