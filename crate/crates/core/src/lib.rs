//! Motion-compensated iterative reconstruction for golden-angle radial MRI.

pub mod data;
pub mod error;
pub mod fft;
pub mod filters;
pub mod imoco;
pub mod io;
pub mod metrics;
pub mod navigator;
pub mod nufft;
pub mod phantom;
pub mod recon;
pub mod registration;
pub mod regularizers;
pub mod solver;
pub mod stats;
pub mod toeplitz;
pub mod trajectory;
pub mod warp;

pub use data::{GridImage, MotionField, RadialKSpace, ReconConfig, SensitivityMaps, Shape, C64};
pub use error::{Error, Result};
pub use navigator::RespiratoryTrace;
pub use trajectory::Trajectory;
