//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The graph is generic over [`Scalar`]: with `f64` it computes gradients;
//! with [`Dual`] it additionally propagates one forward-mode tangent, so the
//! resulting adjoints carry directional derivatives of the gradient. Seeding
//! the parameter tangents with `v` yields `∇²L·v` in the tangent part of the
//! gradient (forward-over-reverse), and seeding only one parameter block
//! gives the mixed partials of the other blocks along `v`.

mod graph;
mod mat;
mod params;
mod scalar;

pub mod fd;

pub use graph::{Grads, Graph, RowMask, Var};
pub use mat::Mat;
pub use params::{NamedMat, ParamSet};
pub use scalar::{Dual, Scalar};
