//! Topology control of a 14-bus transmission grid by imitation learning.
//!
//! The pipeline: a DC power-flow environment with busbar switching
//! ([`env`], [`powerflow`], [`actions`]), simulation experts that label
//! stressed states ([`experts`], [`dataset`]), object graphs with and
//! without busbar-typed edges ([`graphs`]), a small reverse-mode autodiff
//! core ([`autodiff`]) driving an FCNN and two GNNs ([`models`],
//! [`trainer`]), and deployment agents scored on days survived
//! ([`agents`]).
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod actions;
pub mod agents;
pub mod autodiff;
pub mod dataset;
pub mod env;
pub mod error;
pub mod experts;
pub mod graphs;
pub mod grid;
pub mod linalg;
pub mod models;
pub mod powerflow;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model64 = models::Model<f64>;
pub type Model32 = models::Model<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type FlowSolution64 = powerflow::FlowSolution<f64>;
pub type FlowSolution32 = powerflow::FlowSolution<f32>;
