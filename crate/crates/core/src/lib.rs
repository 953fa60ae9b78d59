pub mod error;
pub mod audio;
pub mod features;
pub mod geometry;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod scenes;
pub mod tensor_io;
pub mod training;
pub mod tracks;

pub use error::{Error, Result};
