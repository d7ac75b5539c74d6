//! Exact sparse projections onto the simplex and the hyperplane, the
//! projected-gradient solver built on them, a rank/trace projector for
//! Hermitian matrices, and the experiment drivers that exercise them.

pub mod density;
pub mod error;
pub mod harness;
pub mod linops;
pub mod matrixproj;
pub mod numeric;
pub mod oracle;
pub mod portfolio;
pub mod projections;
pub mod solver;

pub use error::{Error, Result};
pub use projections::{
    gshp, gssp, hyperplane_increment, project_hyperplane, project_simplex, set_function_hyperplane, set_function_simplex,
    telescoped_set_value, top_k_select, ConstraintSpec, ProjectionResult, SparseVector,
};
