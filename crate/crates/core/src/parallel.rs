//! Data-parallel map over independent work items (runs, resamples).
//!
//! With the `parallel` feature the work is spread over a rayon pool; without
//! it, or with [`Parallelism::Sequential`], items run in order on the calling
//! thread. Results always come back in index order, so output does not depend
//! on the worker count.

/// Environment variable overriding the default worker count.
pub const WORKERS_ENV: &str = "CONFDET_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    /// A dedicated pool with this many threads.
    Threads(usize),
    /// The global pool (one thread per available core).
    #[default]
    Available,
}

impl Parallelism {
    pub fn from_workers(workers: usize) -> Self {
        if workers <= 1 {
            Parallelism::Sequential
        } else {
            Parallelism::Threads(workers)
        }
    }

    /// `--workers` flag, else `CONFDET_WORKERS`, else available parallelism.
    pub fn resolve(flag: Option<usize>) -> Self {
        let env = std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse().ok());
        match flag.or(env) {
            Some(w) => Self::from_workers(w),
            None => Parallelism::Available,
        }
    }
}

/// `(0..n).map(f)` collected in index order.
pub fn map_indexed<T, F>(n: usize, parallelism: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match parallelism {
        Parallelism::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Available => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        #[cfg(feature = "parallel")]
        Parallelism::Threads(w) => {
            use rayon::prelude::*;
            match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
                Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
                Err(e) => {
                    log::warn!("could not start a {w}-thread pool ({e}); running sequentially");
                    (0..n).map(f).collect()
                }
            }
        }
        #[cfg(not(feature = "parallel"))]
        _ => (0..n).map(f).collect(),
    }
}

/// Fallible variant of [`map_indexed`]; returns the lowest-index error.
pub fn try_map_indexed<T, E, F>(n: usize, parallelism: Parallelism, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, parallelism, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_are_in_index_order() {
        for p in [Parallelism::Sequential, Parallelism::Threads(3), Parallelism::Available] {
            let v = map_indexed(100, p, |i| i * i);
            assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn first_error_wins() {
        let r: Result<Vec<usize>, usize> =
            try_map_indexed(50, Parallelism::Threads(4), |i| if i % 7 == 3 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(3));
    }

    #[test]
    fn worker_resolution() {
        assert_eq!(Parallelism::from_workers(1), Parallelism::Sequential);
        assert_eq!(Parallelism::from_workers(0), Parallelism::Sequential);
        assert_eq!(Parallelism::resolve(Some(4)), Parallelism::Threads(4));
    }
}
