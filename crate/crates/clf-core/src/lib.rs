//! Control Lyapunov functions for control-affine systems: quadratic
//! certificates from the algebraic Riccati equation, neural value functions
//! trained on the Zubov-HJB equation with Pontryagin two-point boundary
//! value data, and formal verification by interval branch-and-bound plus
//! emitted SMT-LIB2 queries.

pub mod controlsim;
pub mod expr;
pub mod pinn;
pub mod pipeline;
pub mod pmp;
pub mod riccati;
pub mod system;
pub mod verify;

pub use expr::{BoxDomain, Expression, Interval};
pub use pinn::NeuralValueFunction;
pub use pmp::{PMPDataset, TransformSpec};
pub use riccati::QuadraticCertificate;
pub use system::{ControlAffineSystem, CostSpec};
pub use verify::{Condition, Verdict};
