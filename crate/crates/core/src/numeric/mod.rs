//! Dense tensors, a reverse-mode tape and finite-difference gradient checks.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradcheck, gradcheck_params, relative_error, GradcheckReport, FD_STEP, GRAD_TOL};
pub use tape::{scan_flops, Gradients, OpRecord, Tape, Var};
pub use tensor::Tensor;
