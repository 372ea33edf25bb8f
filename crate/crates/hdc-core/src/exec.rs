//! Data-parallel helpers with a sequential fallback.
//!
//! Per-sample work (dataset generation, evaluation, verification sweeps,
//! independent training runs) is expressed as an index map. With the
//! `parallel` feature (default) it fans out over a rayon pool; without it
//! the same call runs sequentially. Results come back in index order either
//! way, so outputs are identical across both modes.
//!
//! The `HDC_THREADS` environment variable bounds the worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use std::sync::Once;

static INIT: Once = Once::new();

/// Install the global worker pool, honoring `HDC_THREADS`. Safe to call
/// more than once; only the first call takes effect. A no-op without the
/// `parallel` feature.
pub fn init_threads() {
    INIT.call_once(|| {
        #[cfg(feature = "parallel")]
        {
            if let Ok(v) = std::env::var("HDC_THREADS") {
                if let Ok(n) = v.trim().parse::<usize>() {
                    if n >= 1 {
                        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                    }
                }
            }
        }
    });
}

/// Map `f` over `0..n`, in parallel when the feature allows.
#[cfg(feature = "parallel")]
pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    init_threads();
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    map_indexed_seq(n, f)
}

/// Always-sequential variant; the benchmark baseline.
pub fn map_indexed_seq<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}
