//! Temporally stable fast style transfer by distilling a flow-conditioned
//! teacher into a frame-local student.

pub mod autograd;
pub mod distiller;
pub mod error;
pub mod flowops;
pub mod linalg;
pub mod losses;
pub mod networks;
pub mod scalar;
pub mod stability;
pub mod tensor;
pub mod videodata;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
