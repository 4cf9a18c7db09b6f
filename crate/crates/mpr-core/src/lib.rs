//! Desk-scale laboratory for learning per-step rewards from point-track
//! motion prediction and using them to improve a behavior-cloned policy
//! with residual off-policy RL in simulated 2D manipulation tasks.
//!
//! Module map:
//! - [`numcore`]: dense f64 tensors, reverse-mode autodiff tape, layers,
//!   AdamW, initializers, checkpoint I/O.
//! - [`tracks`]: point-track data model and preprocessing (background-motion
//!   compensation, resample checks, static-frame filtering, mixture batches).
//! - [`worldsim`]: kinematic 2D environments with ground-truth tracks,
//!   scripted experts and demo-corpus generation with injected nuisances.
//! - [`predictor`]: the point-motion prediction model and its training loop.
//! - [`reward`]: motion-alignment reward plus temporal-distance, sparse and
//!   privileged-dense comparison providers.
//! - [`rl`]: behavior cloning and the residual soft actor-critic stack.

pub mod error;
pub mod numcore;
pub mod predictor;
pub mod reward;
pub mod rl;
pub mod tracks;
pub mod worldsim;

pub use error::{CoreError, CoreResult};
