//! Parking-space occupancy classification by teacher-ensemble
//! pseudo-labeling and lightweight student fine-tuning.

pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod seed;
pub mod student;
pub mod teacher;

pub use error::{Error, Result};
