pub mod backbone;
pub mod bench;
pub mod config;
pub mod error;
pub mod ggca;
pub mod head;
pub mod mask;
pub mod model;
pub mod rng;
pub mod select;
pub mod tensor;
pub mod tracker;
pub mod weights;

pub use error::{Error, FormatError, Result};
