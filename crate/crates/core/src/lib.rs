//! Mel-spectrogram refinement with conditional flow matching.
//!
//! A conformer estimator learns the straight-path vector field that carries
//! Gaussian noise to a clean log-mel, conditioned on the log-mel of a
//! distorted recording. Refinement integrates that field with Euler steps and
//! inverts the result with Griffin-Lim.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod flow;
pub mod net;
pub mod refine;
pub mod scalar;
pub mod simulate;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;

pub type Audio32 = dsp::AudioBuffer<f32>;
pub type Audio64 = dsp::AudioBuffer<f64>;
pub type Mel32 = dsp::MelSpectrogram<f32>;
pub type Mel64 = dsp::MelSpectrogram<f64>;
pub type Estimator32 = net::Estimator<f32>;
pub type Estimator64 = net::Estimator<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Refiner32 = refine::Refiner<f32>;
pub type Refiner64 = refine::Refiner<f64>;
pub type Checkpoint32 = train::Checkpoint<f32>;
pub type Checkpoint64 = train::Checkpoint<f64>;
