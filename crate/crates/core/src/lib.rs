//! Volumetric CNN regression for brain-derived cognitive scores.
//!
//! The crate is organised bottom-up:
//!
//! * [`volgrad`]: dense tensors, a reverse-mode tape, the 3D kernels and Adam.
//! * [`voxcnn`]: the VGG-style volumetric regressor with an auxiliary head,
//!   plus its checkpoint format.
//! * [`residualize`]: covariate encoding and QR-based OLS residualization of
//!   targets.
//! * [`trainer`]: deterministic mini-batch training with validation early
//!   stopping.
//! * [`ensemble`]: convex weighting of independently trained members.
//! * [`dataio`]: the VVOL volume format, the subject manifest and a synthetic
//!   dataset generator with a planted signal.
//! * [`pipeline`]: the residualize, train and weigh steps end to end.
//! * [`selfcheck`]: gradient and loop-oracle checks runnable from the CLI.

pub mod dataio;
pub mod ensemble;
mod error;
pub mod parallel;
pub mod pipeline;
pub mod residualize;
pub mod rng;
mod scalar;
pub mod selfcheck;
pub mod trainer;
pub mod volgrad;
pub mod voxcnn;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
