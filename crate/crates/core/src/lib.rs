pub mod ablate;
pub mod config;
pub mod denoiser;
pub mod edit;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod io;
pub mod localization;
pub mod prng;
pub mod selftest;
pub mod tensor;
pub mod tensor_io;
pub mod text;

pub use config::EditConfig;
pub use error::{Error, Result};
pub use tensor::Tensor;
