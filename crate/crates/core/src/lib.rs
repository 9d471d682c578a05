pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod ranknn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Axis, Field, Layout, Mat};
