#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod disorder;
pub mod error;
pub mod geometry;
pub mod heat;
pub mod invariant;
pub mod model;
pub mod potential;
pub mod noise;
pub mod scalar;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type Graph64 = geometry::GraphSpace<f64>;
pub type Graph32 = geometry::GraphSpace<f32>;
pub type SimConfig64 = solver::SimConfig<f64>;
pub type SimConfig32 = solver::SimConfig<f32>;
pub type StationaryConfig64 = invariant::StationaryConfig<f64>;
pub type StationaryConfig32 = invariant::StationaryConfig<f32>;
