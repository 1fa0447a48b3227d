pub mod apps;
pub mod autograd;
pub mod camera;
pub mod config;
pub mod conv;
pub mod dataio;
pub mod error;
pub mod features;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod par;
pub mod pyramid;
pub mod render;
pub mod resample;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
