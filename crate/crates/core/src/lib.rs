//! Multi-resolution spatio-temporal modelling of voxel-grid time series.

pub mod activation;
pub mod dataset;
pub mod design;
pub mod error;
pub mod localcov;
pub mod numerics;
pub mod pipeline;
pub mod regional;
pub mod rng;
pub mod select;
pub mod shrinkage;
pub mod sim;
pub mod state;
pub mod temporal;

pub use error::{Error, Result};
