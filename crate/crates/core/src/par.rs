//! Data-parallel helpers. With the `parallel` feature these fan out over
//! rayon's pool; without it every path runs sequentially.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Order-preserving map over a slice.
pub fn map<T, U, F>(exec: Execution, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Like [`map`], but runs on a dedicated pool of at most `threads` workers
/// so callers can bound concurrency (e.g. in-flight model calls).
pub fn map_bounded<T, U, F>(exec: Execution, threads: usize, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel if threads > 1 => {
            match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                Ok(pool) => pool.install(|| map(Execution::Parallel, items, f)),
                Err(e) => {
                    log::warn!("thread pool unavailable ({e}); running sequentially");
                    items.iter().map(f).collect()
                }
            }
        }
        _ => {
            let _ = threads;
            items.iter().map(f).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_strategies_preserve_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = map(Execution::Sequential, &xs, |x| x * x);
        let par = map(Execution::Parallel, &xs, |x| x * x);
        let bounded = map_bounded(Execution::Parallel, 3, &xs, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(seq, bounded);
    }
}
