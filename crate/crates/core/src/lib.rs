//! Credit-rating transition matrices as stochastic processes on the Lie group
//! of stochastic matrices.
//!
//! The crate covers the full pipeline: Aalen-Johansen estimation from rating
//! histories, bootstrap target series, simulation of the direct-exponential
//! CIR model and the geometric Euler-Maruyama model, moment matching
//! calibration, and checks of the usual rating-matrix properties.

pub mod aalen_johansen;
pub mod calibration;
pub mod demo;
pub mod error;
pub mod lie;
pub mod moments;
pub mod plots;
pub mod rating_data;
pub mod rng;
pub mod sde;
mod small;
pub mod synth;
pub mod validator;

pub use error::{Error, Result};
pub use lie::{BasisIndex, GeneratorElement, Matrix, TransitionMatrix};
pub use moments::{MomentSet, ObjectiveConfig};
pub use rating_data::{MatrixSeries, RatingHistory, RatingScale};
pub use sde::{Family, ModelParams, PathEnsemble, SimulationGrid};
