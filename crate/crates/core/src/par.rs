//! Order-preserving data-parallel map with a sequential fallback.
//!
//! Results always come back in index order, so any reduction the caller
//! performs afterwards is independent of the thread count.

#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<R, F>(n: usize, parallel: bool, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if parallel && n > 1 {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<R, F>(n: usize, _parallel: bool, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Whether this build can execute in parallel at all.
pub const PARALLEL_AVAILABLE: bool = cfg!(feature = "parallel");
