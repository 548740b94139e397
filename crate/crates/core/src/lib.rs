pub mod attention;
pub mod calibration;
pub mod error;
pub mod harness;
pub mod mkc;
pub mod sparse;
pub mod store;
pub mod tensor;
pub mod workload;

pub use error::{Error, Result};
