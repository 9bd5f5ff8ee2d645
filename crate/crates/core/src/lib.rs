pub mod annotations;
pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod decode;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod model;
pub mod pipeline;
pub mod seqcodec;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
