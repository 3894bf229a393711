//! Bad densities for the prescribed Jacobian problem in the plane, and the
//! numerical instruments used to probe them: checkerboard constructions,
//! piecewise-affine maps with bi-Lipschitz estimates, a constrained Jacobian
//! fitting solver, stretch certificates and a set-convergence verifier.

pub mod certify;
pub mod density;
pub mod experiment;
pub mod geometry;
pub mod plmap;
pub mod solver;

pub use density::{CheckerboardSpec, DensityField, PartitionWeights};
pub use geometry::{Point, RasterMask, Rect, Segment, SegmentSet};
pub use plmap::{PiecewiseAffineMap, StretchReport};
pub use solver::{SolveReport, SolverConfig};
