//! Cross-validated training and majority-vote ensembling of small CNN
//! classifiers for three-class ultrasound images (normal, benign, malignant).

pub mod augment;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod neuralnet;
pub mod optim;
pub mod plots;
pub mod raster;
pub mod run;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
