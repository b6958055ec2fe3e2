pub mod bench;
pub mod curation;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod labels;
pub mod lidar;
pub mod map;
pub mod nn;
pub mod pipeline;
pub mod scene;
pub mod semseg;
pub mod toy;
pub mod vae;

pub use error::{Error, Result};
