#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod error;
pub mod eval;
pub mod fit;
pub mod manifold;
pub mod model;
pub mod modelfile;
pub mod optim;
pub mod scalar;
pub mod simgen;
pub mod stream;
pub mod tuning;

pub use error::{FpcaError, Result};
pub use scalar::Scalar;

pub type SplineSpace64 = basis::SplineSpace<f64>;
pub type StiefelPoint64 = manifold::StiefelPoint<f64>;
pub type GeneralizedStiefel64 = manifold::GeneralizedStiefel<f64>;
pub type Subject64 = model::Subject<f64>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type Problem64 = model::Problem<f64>;
pub type FitOutput64 = fit::FitOutput<f64>;
pub type FpcEstimate64 = eval::FpcEstimate<f64>;
pub type ModelFile64 = modelfile::ModelFile<f64>;
