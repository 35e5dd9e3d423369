pub mod attention;
pub mod benchmark;
pub mod convolution;
pub mod encoder;
pub mod error;
pub mod io;
pub mod masking;
pub mod oracle;
pub mod real;
pub mod streaming;
pub mod suites;

pub use error::{Error, Result};
pub use real::{Precision, Real};
