//! Worker pool for per-image fan-out, capped by `OAP_THREADS`.

use std::sync::OnceLock;

use rayon::prelude::*;

/// Worker count: `OAP_THREADS` if set and positive, else the number of cores.
pub fn threads() -> usize {
    std::env::var("OAP_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| rayon::ThreadPoolBuilder::new().num_threads(threads()).build().expect("thread pool"))
}

/// Runs `f(0..n)` on the pool and returns the results in index order.
pub fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if n <= 1 || threads() == 1 {
        return (0..n).map(f).collect();
    }
    pool().install(|| (0..n).into_par_iter().map(f).collect())
}
