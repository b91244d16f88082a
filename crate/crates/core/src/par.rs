//! Order-preserving map over independent work items, run either on the
//! rayon pool or on the calling thread.
//!
//! Results are always returned in index order, so any reduction done by the
//! caller is independent of the execution strategy.

/// How independent work items are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// One item after another on the calling thread.
    Sequential,
    /// Data-parallel; `jobs = None` uses all available cores. Falls back to
    /// sequential execution when the crate is built without `parallel`.
    #[default]
    Parallel,
    /// Data-parallel on a dedicated pool of the given size.
    Jobs(usize),
}

impl Execution {
    /// `Jobs(1)` and builds without the `parallel` feature are sequential.
    pub fn from_jobs(jobs: Option<usize>) -> Self {
        match jobs {
            None => Execution::Parallel,
            Some(0) | Some(1) => Execution::Sequential,
            Some(n) => Execution::Jobs(n),
        }
    }
}

/// `(0..n).map(f)` collected in index order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..n).map(f).collect(),
        Execution::Parallel => parallel_map(n, f),
        Execution::Jobs(jobs) => with_pool(jobs, || parallel_map(n, &f)),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
fn with_pool<R: Send>(jobs: usize, op: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(op),
        Err(e) => {
            log::warn!("could not build a {jobs}-thread pool ({e}); using the global pool");
            op()
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn with_pool<R: Send>(_jobs: usize, op: impl FnOnce() -> R + Send) -> R {
    op()
}
