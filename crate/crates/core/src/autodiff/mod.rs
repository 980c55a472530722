//! Dense `f64` arrays with a define-by-run reverse-mode tape.
//!
//! The primitive set is exactly what the consistency networks and their
//! losses need: affine layers, SiLU/tanh, square roots, row reductions,
//! column concatenation, row splicing and means. Broadcasting is limited to
//! scalar-with-array and the bias row of an affine layer.

mod array;
pub mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::grad_check;
pub(crate) use tape::sigmoid;
#[doc(hidden)]
pub use tape::{inject_silu_fault, FaultGuard};
pub use tape::{Gradients, Tape, Var};
