//! Dense and sparse linear algebra needed by the surface operators.

pub mod dense;
pub mod sparse;

pub use dense::{symmetric_eigen, DenseMatrix};
pub use sparse::{Csr, EnvelopeCholesky};
