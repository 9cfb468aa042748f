//! Chained conditional normalizing flows for trajectory prediction.
//!
//! The model predicts per-timestep probability densities of future 2D
//! positions: a stack of `T_f` independently parameterized conditional flows
//! transforms a Gaussian anchored at the newest observed position through one
//! step after another, so every prediction step carries an analytically
//! evaluable density. Because each step's log-density-change terms are cached
//! alongside the samples, arrival of a new observation allows a density
//! update that replaces only the base Gaussian term and reuses everything
//! else — no network evaluation at all.
//!
//! Crate layout:
//!
//! - [`numcore`] — tensors, reverse-mode autodiff tape, MLPs, Adam,
//!   parameter serialization.
//! - [`flows`] — affine coupling / masked autoregressive bijections and the
//!   continuously-indexed flow (CIF) wrapper.
//! - [`encoder`] — recurrent temporal encoder with optional social pooling,
//!   producing the condition vector.
//! - [`chain`] — the flow chain: prediction, fast update, exact density
//!   evaluation, density maps.
//! - [`data`] — synthetic generators (fork-road, unicycle) with analytic
//!   ground-truth densities, plus TrajNet-format ingestion.
//! - [`metrics`] — best-of-N ADE/FDE, grid EMD via an exact transportation
//!   solve, Gaussian KDE baseline.
//! - [`train`] — per-stage negative-log-likelihood training and
//!   checkpointing.

pub mod chain;
pub mod data;
pub mod encoder;
pub mod error;
pub mod flows;
pub mod gauss;
pub mod geom;
pub mod metrics;
pub mod numcore;
pub mod train;

pub use error::{Error, Result};
pub use geom::{Point2, Trajectory};
