//! Numerical analysis of parametric constraint systems
//! `F(p) = {x : h_i(p,x) <= 0, i in I; h_i(p,x) = 0, i in I0}`.
//!
//! The crate checks the relaxed constant rank condition on concrete
//! instances, estimates regularity moduli (the R-regularity error-bound
//! constant, the Aubin modulus and the lower-Lipschitz constant) from
//! seeded samples, projects onto `F(p)` with Lagrange multiplier recovery,
//! and provides the value-function and partial-penalty tools for bilevel
//! problems built on such systems.
//!
//! Every estimate is sample-based. Sup-ratio estimates are lower bounds on
//! the true moduli, divergence flags are falsification evidence, and
//! "verified" verdicts only ever mean "verified on samples".

pub mod bilevel;
pub mod cq;
pub mod expr;
pub mod fixtures;
pub mod numerics;
pub mod projection;
pub mod regularity;
pub mod sampling;
mod solver;
pub mod system;

pub use expr::{parse, EvalError, Expr, ParseError, Wrt};
pub use projection::{project, ProjectOpts, ProjectionResult, Status};
pub use system::{ParametricSystem, ProblemFile};
