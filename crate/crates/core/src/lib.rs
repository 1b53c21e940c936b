pub mod error;
pub mod bfn;
pub mod cli;
pub mod egnn;
pub mod encoder;
pub mod geom;
pub mod manipulate;
pub mod metrics;
pub mod moldata;
pub mod params;
pub mod tape;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
