//! File formats, the synthetic dataset on disk, the training and evaluation
//! drivers and the rig exporter built on `rigforge-core`.

pub mod bench;
pub mod binio;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod formats;
pub mod fsutil;
pub mod image;
pub mod infer;
pub mod obj;
pub mod rigfile;
pub mod train;

pub use error::{Error, Result};
pub use rigforge_core as core;

/// Worker count from `RIGFORGE_THREADS`, when set to a positive integer.
pub fn thread_limit() -> Option<usize> {
    std::env::var("RIGFORGE_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Sizes the global rayon pool from `RIGFORGE_THREADS`. Safe to call more
/// than once; only the first call has an effect.
pub fn init_threads() {
    if let Some(n) = thread_limit() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
