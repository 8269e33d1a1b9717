//! Recurrent visual attention model for binary image classification.
//!
//! The model looks at an image through a sequence of two-scale glimpses,
//! encodes each with a stacked convolutional autoencoder, integrates them with
//! an LSTM, and picks the next glimpse location by sampling from a Gaussian
//! policy. Classification is trained with cross entropy; the policy is trained
//! with REINFORCE against a learned baseline.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod glimpse;
mod init;
pub mod params;
pub mod pgm;
pub mod ram;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Padding, Tape, Var};
pub use error::{Error, Result};
pub use params::{Grads, ParamId, ParamStore, SgdMomentum};
pub use tensor::Tensor;
pub use glimpse::{extract_glimpse, GlimpseConfig, Location};
pub use ram::{EpisodeTrace, LocationMode, ModelConfig, RamModel};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use synth::{LabeledImage, SynthConfig, Task};
pub use trainer::TrainConfig;
