//! File formats, configuration, checkpoints and the training, evaluation and
//! inference workflows around [`mfds_core`].

pub mod checkpoint;
pub mod coco;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod labelme;
pub mod overlay;
pub mod runner;

pub use error::{Error, Result};
