pub mod checkpoint;
pub mod discriminator;
pub mod error;
pub mod extractors;
pub mod generator;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod sampling;
pub mod selector;
pub mod skeleton;
pub mod store;
pub mod strokes;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
