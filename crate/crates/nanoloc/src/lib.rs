//! Nanometric axial localization from dual-focal-plane images.
//!
//! The crate implements the full measurement pipeline:
//!
//! 1. **`sim`** – synthetic z-stacks of point-like nanoparticles with a
//!    skewed axial brightness envelope, defocus-widened lateral spot,
//!    sensor noise, and stage-encoder jitter.
//! 2. **`reference`** – brightness-weighted reference axial coordinates
//!    with propagated uncertainties, plus the Gaussian fit of the mean
//!    brightness profile (the single-focal-plane accuracy baseline).
//! 3. **`pairs`** – dual-plane training pairs at a chosen offset, split by
//!    particle into train/test, serialized in the `NLT` binary format.
//! 4. **`nn`** – a from-scratch CNN regressor (conv / ReLU / batch norm /
//!    average pooling / fully connected / dropout) with reverse-mode
//!    gradients, Adam, and MSE loss.
//! 5. **`eval`** – residual analysis of trained models: localization
//!    accuracy, proportionality, and the offset sweep.
//! 6. **`pipeline`** – stage orchestration behind the `nanoloc` binary and
//!    the runnable examples.
//!
//! Every stage is deterministic given its configuration and seed; see
//! [`config::stage_seed`] for how per-stage seeds derive from the master
//! seed.

pub mod config;
pub mod error;
pub mod gaussfit;
pub mod nlt;
pub mod nn;
pub mod pairs;
pub mod reference;
pub mod sim;
pub mod stats;

pub use config::{OpticalConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
