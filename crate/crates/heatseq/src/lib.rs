pub mod config;
pub mod encodings;
pub mod losses;
pub mod model;
pub mod error;
pub mod fdsolver;
pub mod formats;
pub mod geometry;
pub mod inference;
pub mod scenario;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
