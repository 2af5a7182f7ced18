//! Numerical core of rigforge.
//!
//! Everything in this crate is allocation-backed but IO-free and `no_std`:
//! triangle meshes and their intrinsic operators, a define-by-run reverse-mode
//! autodiff tape, the FACS-conditioned diffusion network, a soft rasterizer
//! with analytic vector-Jacobian products, linear blendshape rigs with their
//! error metrics, and the procedural head generator used as training data.
//!
//! File formats, the dataset layout on disk and the training driver live in
//! the `rigforge` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod error;
pub mod facs;
pub mod linalg;
pub mod math;
pub mod mesh;
pub mod network;
pub mod operators;
pub mod render;
pub mod rig;
pub mod schedule;
pub mod synth;

pub use error::{Error, Result};
pub use facs::FacsVector;
pub use mesh::{NormalizationTransform, TriMesh};
pub use operators::{Eigenbasis, MassDiagonal, SparseSymmetric, SurfaceOperators};
