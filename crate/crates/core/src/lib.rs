//! Geometry, labeling and evaluation machinery for 6-DoF parallel-jaw grasp
//! detection on point clouds.

pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graspness;
pub mod grouping;
pub mod io;
pub mod mra;
pub mod normals;
pub mod semantic;
pub mod simscene;
pub mod spatial;

pub use error::{Error, Result};
