//! Model zoo: convolutional classifiers and the dual-encoder U-Net.

pub mod cnn;
pub mod fit;
pub mod unet;

pub use cnn::{build_classifier, ArchId, Classifier};
pub use fit::{accuracy, fit, predict_probs, select_batch, select_rows, OptimizerKind, TrainCfg};
pub use unet::{Unet, UnetConfig};
