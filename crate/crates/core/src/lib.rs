//! Differentiable co-design of stretch-sensor layouts and shape predictors on
//! B-spline surfaces.
//!
//! A layout is a set of straight segments in the UV square of a surface, each
//! with a soft on/off mask. The lengths of their images on a deformed surface
//! feed an MLP that predicts the surface's control grid. Layout and predictor
//! are trained jointly by Adam against a reconstruction loss plus
//! manufacturability penalties, with exact gradients throughout.

pub mod data;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod grad;
pub mod gradcheck;
pub mod layout;
pub mod losses;
pub mod predictor;
pub mod rng;
pub mod svg;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
pub use geometry::{BSplineSurface, ControlGrid, Vec3};
pub use layout::{ConstraintMode, Sensor, SensorLayout};
pub use losses::{LossBreakdown, LossConfig};
pub use predictor::PredictorParams;
pub use trainer::{TrainConfig, TrainReport};
