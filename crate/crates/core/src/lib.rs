pub mod ciffp;
pub mod cli;
pub mod embio;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod msalm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
