//! Walking gait synthesis for planar bipeds, step-to-step analysis and
//! sampled barrier certificates of forward-invariant sets of the reduced
//! return map.

pub mod config;
pub mod control;
pub mod error;
pub mod gait;
pub mod hybrid;
pub mod invariance;
pub mod model;
pub mod ode;
pub mod poincare;
pub mod sim;
pub mod synth;

pub use error::{Error, Result};
pub use model::{RobotModel, State};
