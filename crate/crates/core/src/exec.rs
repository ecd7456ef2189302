//! Data-parallel execution over independent work items.
//!
//! Every hot loop in the crate (per-sample gradients in a batch, evaluation
//! over a split, encounter generation, Monte-Carlo oracles) maps a pure
//! function over an index range and then reduces the results in index order.
//! Because the reduction order never depends on scheduling, results are
//! bit-identical between [`Exec::Sequential`] and [`Exec::Parallel`].
//!
//! With the `parallel` feature disabled, `Exec::Parallel` silently runs
//! sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Sequential,
    Parallel,
}

impl Exec {
    /// `--threads 1` means sequential; anything larger uses the rayon pool.
    pub fn from_threads(threads: usize) -> Self {
        if threads > 1 {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel => (0..n).map(f).collect(),
        }
    }

    pub fn try_map<T, E, F>(self, n: usize, f: F) -> Result<Vec<T>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> Result<T, E> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }
}

/// Installs a global rayon pool with `threads` workers. A no-op without the
/// `parallel` feature or when a pool already exists.
pub fn init_thread_pool(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        if threads > 1 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
