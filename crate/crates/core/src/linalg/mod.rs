//! Dense matrices and a reverse-mode tape over the primitives the filter needs.

pub mod cholesky;
mod graph;
mod matrix;
pub mod prim;
mod tape;

pub use cholesky::{cholesky_ladder, cholesky_spd};
pub use graph::{Eager, Graph};
pub use matrix::Matrix;
pub use prim::{wrap_angle, Prim};
pub use tape::{backward, Gradients, NodeId, Tape};
