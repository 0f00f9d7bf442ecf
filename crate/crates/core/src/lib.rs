//! Semi-discrete optimal transport solver for metasurface refractor design.
//!
//! Given a source density on a planar aperture and a finite set of target
//! points with prescribed energies, the library computes the phase weights
//! `b` such that the phase `phi(X) = min_i(|X| + |X - Y_i| + b_i)` refracts
//! the source onto the targets with the requested energy split. Laguerre
//! cells are built through a lifted 3D power diagram, cell masses and the
//! mass Jacobian feed a damped Newton iteration, and solutions are checked
//! by Monte-Carlo ray tracing. Far-field (collimated and point-source)
//! variants use the same Newton core on polygonal cells.

pub mod cells;
pub mod cli;
pub mod distribution;
pub mod farfield;
pub mod geometry;
pub mod polygon;
pub mod polyhedron;
pub mod solver;
pub mod svg;

pub use geometry::{PlanePoint, Scene, TargetPoint, Weights};

/// Library version string.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
