pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod resvae;
pub mod ssim;
pub mod synthgen;
pub mod training;
pub mod volume;

pub use error::{Result, UadError};
