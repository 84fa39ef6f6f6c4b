pub mod cbam;
pub mod data;
pub mod metrics;
pub mod nn;
pub mod error;
pub mod gradsuite;
pub mod params;
pub mod swin;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Session};
pub use tensor::{Tape, Tensor, Var};
