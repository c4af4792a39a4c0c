//! Situated 3D scene grounding and question answering on voxel tokens.

pub mod error;
pub mod geometry;
pub mod tinynn;
pub mod voxtok;
pub mod scenegen;
pub mod sit_target;
pub mod situnet;
pub mod config;
pub mod eval;
