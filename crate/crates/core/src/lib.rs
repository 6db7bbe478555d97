//! Merging diffusion score experts trained under different noise schedules.
//!
//! Experts are matched by negative log-SNR, combined with a hard switch at a threshold
//! time, and evaluated for likelihood (probability-flow ODE and variational bounds) and
//! sample quality.

pub mod error;
pub mod eval;
pub mod expert;
pub mod field;
pub mod integrate;
pub mod likelihood;
pub mod merge;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod stats;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use expert::{Expert, ExpertModel, ParamKind, ScoreNet};
pub use field::ScoreField;
pub use integrate::{SolverConfig, Trajectory};
pub use merge::{AdaptedExpert, MergedExpert};
pub use scalar::Scalar;
pub use schedule::{NoiseSchedule, SwitchingBounds, VpCoefficients};

pub type Schedule = schedule::NoiseSchedule<f64>;
pub type Schedule32 = schedule::NoiseSchedule<f32>;
pub type Expert64 = expert::Expert<f64>;
pub type Expert32 = expert::Expert<f32>;
pub type Merged64 = merge::MergedExpert<f64>;
pub type Merged32 = merge::MergedExpert<f32>;
pub type Net64 = expert::ScoreNet<f64>;
