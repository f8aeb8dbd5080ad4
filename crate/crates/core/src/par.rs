//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan out over rayon; without it (or
//! after `set_parallel(false)`) they run the same closures sequentially, so
//! both paths produce bit-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Minimum number of items before work is split across threads.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_ITEMS: usize = 2;

/// Toggle parallel execution at runtime. No effect without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Size the global worker pool. Returns false if the pool was already built.
pub fn configure_workers(workers: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        false
    }
}

/// Reads `ZEST_NUM_WORKERS` and sizes the pool accordingly.
pub fn configure_from_env() {
    if let Some(n) = std::env::var("ZEST_NUM_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        configure_workers(n);
    }
}

/// Calls `f(chunk_index, chunk)` for consecutive `chunk_len`-sized chunks of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if parallel_enabled() && data.len() / chunk_len >= MIN_PARALLEL_ITEMS {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// `(0..n).map(f).collect()`, possibly in parallel. Output order is preserved.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n >= MIN_PARALLEL_ITEMS {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
