use rayon::prelude::*;

use crate::error::{Error, Result};

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool
/// when `workers` is `None`.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::InvalidInput(
            "worker count must be at least 1".into(),
        )),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Evaluates `f` on every item, preserving input order, and returns the
/// first error by index (not by completion time).
pub fn map_ordered<I, T, F>(items: &[I], f: F) -> Result<Vec<T>>
where
    I: Sync,
    T: Send,
    F: Fn(usize, &I) -> Result<T> + Sync,
{
    let results: Vec<Result<T>> = items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    results.into_iter().collect()
}
