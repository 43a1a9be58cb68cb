//! Double-ELBO proper scoring rules and fully variational noise-contrastive
//! estimation (fvNCE) for latent-variable models.
//!
//! * [`psr`]: the `(alpha, beta)` scoring-pair family and its certificates.
//! * [`dist`]: Gaussian, KDE and tabular distributions.
//! * [`diff`]: a small reverse-mode tape, Adam and checkpoints.
//! * [`nnmodel`]: MLP decoders/encoders and exact tabular joint models.
//! * [`losses`]: Monte-Carlo estimators of every objective.
//! * [`oracle`]: exact enumeration of the objectives on tabular models.
//! * [`experiment`]: datasets, training loops, sweeps and reconstructions.

pub mod diff;
pub mod dist;
pub mod experiment;
pub mod losses;
pub mod matrix;
pub mod nnmodel;
pub mod oracle;
pub mod psr;

pub use matrix::Matrix;
pub use psr::{Outcome, ScoringPair};
