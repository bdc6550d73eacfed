//! Signed-distance-field reconstruction on an adaptive tetrahedral grid.
//!
//! The library fits a piecewise-linear SDF plus a per-cell appearance model to
//! posed RGB images by differentiable volume rendering, extracts triangle
//! meshes with an in-loop differentiable marching-tetrahedra pass, and adapts
//! the underlying Delaunay grid to the evolving surface (densify / cull /
//! prune).  Everything is deterministic for a fixed seed and thread count.

pub mod adapt;
pub mod cli;
pub mod field;
pub mod geometry;
pub mod losses;

pub mod mesh;
pub mod optim;
pub mod render;
pub mod scenes;

/// 3-component double-precision vector used throughout.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3x3 double-precision matrix (camera rotations, small solves).
pub type Mat3 = nalgebra::Matrix3<f64>;
