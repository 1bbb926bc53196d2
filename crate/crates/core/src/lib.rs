pub mod backprojection;
pub mod data_io;
pub mod error;
pub mod filtration;
pub mod geometry;
pub mod gradcheck;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{DnaError, Result};
pub use tensor::{Real, Tensor};
