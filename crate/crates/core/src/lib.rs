pub mod attacks;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod models;
pub mod oracles;
pub mod trainer;

pub use error::{Error, Result};
pub use mngac_tensor as tensor;
