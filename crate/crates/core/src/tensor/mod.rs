//! Dense `f64` arrays with a reverse-mode tape and tape-recorded
//! forward-mode tangents.

mod array;
mod dual;
mod graph;
mod params;
mod tracer;

pub use array::Tensor;
pub use dual::{jvp, Dual, DualTracer};
pub use graph::{backward, Gradients, Graph, Var};
pub use params::{ParamEntry, ParamStore};
pub use tracer::{Tracer, Unary};
