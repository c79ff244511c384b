pub mod calib;
pub mod cube;
pub mod error;
pub mod io;
pub mod oxy;
pub mod pipeline;
pub mod reflect;
pub mod sim;

pub use error::{Error, Result};
