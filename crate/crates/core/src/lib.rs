//! Limited-memory BFGS for bound constraints on a product of a box and a
//! Riemannian manifold (sphere, special orthogonal group or Stiefel manifold).
//!
//! ```
//! use rlbfgsb::{solve, BoxBounds, Geometry, FnProblem, ProductPoint, ProductTangent, SolverOptions};
//!
//! let geometry = Geometry::box_only(BoxBounds::new(vec![1.0], vec![5.0]).unwrap());
//! let problem = FnProblem::new(
//!     "shifted-square",
//!     geometry,
//!     |p: &ProductPoint| (p.euclidean[0] + 2.0).powi(2),
//!     |p: &ProductPoint| ProductTangent::from_slice(&[2.0 * (p.euclidean[0] + 2.0)]),
//! );
//! let result = solve(&problem, ProductPoint::from_slice(&[3.0]), &SolverOptions::default()).unwrap();
//! assert_eq!(result.point.euclidean[0], 1.0);
//! ```

pub mod error;
pub mod gcd;
pub mod geometry;
pub mod linesearch;
pub mod memory;
pub mod problems;
pub mod solver;

pub use error::{Error, Result};
pub use gcd::{generalized_cauchy_direction, GcdOutcome, GcdStatus};
pub use geometry::{BoxBounds, Geometry, ManifoldKind, ProductPoint, ProductTangent};
pub use linesearch::{armijo_capped, LineSearchConfig};
pub use memory::{LbfgsMemory, ThetaRule};
pub use problems::{Counting, FnProblem, Problem};
pub use solver::{projected_gradient_norm, solve, DirectionRule, Solver, SolverOptions, SolverResult, Termination};
