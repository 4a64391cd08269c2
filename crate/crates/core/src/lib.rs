//! Semiparametric Bayesian two-part model for semicontinuous responses.
//!
//! The occurrence part models `δ = I(y > 0)` through a Dirichlet-process
//! mixture of logistic thresholds; the intensity part models the positive
//! responses `z` given covariates `x` with a truncated stick-breaking
//! mixture of joint Normals, read as a mixture of linear experts. The two
//! are combined into a predictive distribution for `y`, with a point mass
//! at zero.
//!
//! Everything numeric is generic over [`scalar::Real`] (`f32` or `f64`);
//! the aliases below fix `f64`.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod linalg;
pub mod part1;
pub mod part2;
pub mod predictive;
pub mod run;
pub mod scalar;
pub mod simulate;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Config = config::Config<f64>;
pub type Dataset = data::SemicontinuousDataset<f64>;
pub type Part1Draw = part1::Part1Draw<f64>;
pub type Part2Draw = part2::Part2Draw<f64>;
pub type Posterior = run::Posterior<f64>;
pub type PredictiveSurface = predictive::PredictiveSurface<f64>;
pub type GeneratorSpec = simulate::GeneratorSpec<f64>;
