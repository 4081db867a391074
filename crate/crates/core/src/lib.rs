//! Radar precipitation nowcasting benchmark.
//!
//! The crate covers the whole chain from radar grids to verification
//! reports: frame and manifest I/O ([`gridio`]), Z–R conversion and clutter
//! removal ([`preprocess`]), event sampling and folds ([`sampler`]), a small
//! tensor core with explicit backward passes ([`autotensor`]), a 3D U-Net that
//! predicts 18 lead times in one pass with an optional echo-top-height
//! channel ([`unet3d`]), extrapolation baselines ([`baselines`]), the
//! verification metrics ([`verify`]), a synthetic storm generator
//! ([`synthgen`]) and the multi-seed experiment harness ([`experiment`]).

pub mod autotensor;
pub mod baselines;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod gridio;
pub mod preprocess;
pub mod sampler;
pub mod synthgen;
pub mod unet3d;
pub mod verify;

pub use error::{Error, Result};
