//! Data-parallel execution helpers.
//!
//! Every kernel splits its output into fixed-size chunks whose boundaries do
//! not depend on the thread count, so sequential and parallel execution give
//! bit-identical results. Without the `parallel` feature the parallel path
//! compiles down to the sequential one.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Work below this many scalar operations stays on the calling thread.
const MIN_PARALLEL_WORK: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

/// Globally enables or disables the parallel path (it is on by default when
/// the `parallel` feature is compiled in).
pub fn set_enabled(enabled: bool) {
    ENABLED.store(enabled, Ordering::SeqCst);
}

pub fn is_available() -> bool {
    cfg!(feature = "parallel")
}

impl Exec {
    pub fn auto() -> Self {
        if is_available() && ENABLED.load(Ordering::Relaxed) {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    fn worth_it(self, work: usize) -> bool {
        self == Exec::Parallel && is_available() && work >= MIN_PARALLEL_WORK
    }

    /// Runs `f(chunk_index, chunk)` over `data.chunks_mut(chunk)`.
    /// `cost` is the approximate work per element.
    pub fn chunks_mut<T, F>(self, data: &mut [T], chunk: usize, cost: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        if self.worth_it(data.len().saturating_mul(cost)) && data.len() > chunk {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                data.par_chunks_mut(chunk)
                    .enumerate()
                    .for_each(|(i, c)| f(i, c));
                return;
            }
        }
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map_range<O, F>(self, n: usize, cost: usize, f: F) -> Vec<O>
    where
        O: Send,
        F: Fn(usize) -> O + Sync + Send,
    {
        if self.worth_it(n.saturating_mul(cost)) && n > 1 {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                return (0..n).into_par_iter().map(f).collect();
            }
        }
        (0..n).map(f).collect()
    }
}
