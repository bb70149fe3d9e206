pub mod error;
pub mod imageio;
pub mod permute;

pub use error::{Error, Result};
