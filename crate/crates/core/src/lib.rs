//! Hyperbolicity certification and conjugacy construction for C¹ flows on
//! Euclidean space via moving transversal frames and exponential dichotomies.
//!
//! The pipeline, bottom-up:
//!
//! * [`field`]: term-list vector fields, flows and variational equations;
//! * [`frame`]: transversal orthonormal frames transported by Gram-Schmidt;
//! * [`reduced`]: the upper-triangular reduced linearized system, its
//!   qualitative functions and the hyperbolicity certificate;
//! * [`standard`]: section charts, lifted fields and standard systems;
//! * [`dichotomy`]: bounded solutions of triangular dichotomic systems;
//! * [`conjugacy`]: the time-preserving conjugacy offsets and their checks;
//! * [`scenario`] / [`report`]: the scenario-file front end used by the `liao` binary.

pub mod conjugacy;
pub mod dichotomy;
pub mod error;
pub mod field;
pub mod frame;
pub mod linalg;
pub mod reduced;
pub mod report;
pub mod scenario;
pub mod standard;

pub use error::{LiaoError, Result};
