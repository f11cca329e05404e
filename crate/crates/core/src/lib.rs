pub mod data;
pub mod error;
pub mod eval;
pub mod lang;
pub mod probe;
pub mod runner;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod zoo;

pub use error::{Error, Result};
