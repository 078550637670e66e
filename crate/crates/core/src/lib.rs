//! Speckle removal with score-based diffusion in the log domain.

pub mod error;
pub mod forward;
pub mod imgio;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod score;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use forward::{Dims, ImageTensor, LogImage};
pub use schedule::NoiseSchedule;
pub use score::ScoreModel;
