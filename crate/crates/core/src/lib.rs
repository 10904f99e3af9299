pub mod autodiff;
pub mod diarization;
pub mod dsp;
pub mod error;
pub mod mixture;
pub mod model;
pub mod rng;
pub mod train;
pub mod verification;

pub use error::{Error, Result};
