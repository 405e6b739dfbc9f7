pub mod config;
pub mod dtw;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
