//! Block-parallel map with an in-order merge.
//!
//! Work is split into fixed-size index blocks. Every block is processed by the
//! same closure whether it runs on the rayon pool or on the calling thread, and
//! results come back in block order, so output never depends on the worker count.
//! Without the `parallel` feature every [`Exec`] runs sequentially.

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Exec {
    /// `Some(1)` means sequential; anything else uses the pool.
    pub fn for_threads(threads: Option<usize>) -> Exec {
        match threads {
            Some(1) => Exec::Sequential,
            _ if cfg!(feature = "parallel") => Exec::Parallel,
            _ => Exec::Sequential,
        }
    }
}

fn blocks(len: usize, block: usize) -> impl Iterator<Item = Range<usize>> + Clone {
    let block = block.max(1);
    (0..len.div_ceil(block)).map(move |b| b * block..((b + 1) * block).min(len))
}

/// Applies `f` to consecutive ranges of `0..len` and returns the results in range order.
pub fn map_blocks<R, F>(exec: Exec, len: usize, block: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            let ranges: Vec<Range<usize>> = blocks(len, block).collect();
            ranges.into_par_iter().map(f).collect()
        }
        _ => blocks(len, block).map(f).collect(),
    }
}

/// Runs `f` on a pool capped at `threads` workers (the global pool when `None`).
pub fn install<R, F>(threads: Option<usize>, f: F) -> R
where
    R: Send,
    F: FnOnce(Exec) -> R + Send,
{
    let exec = Exec::for_threads(threads);
    #[cfg(feature = "parallel")]
    if let (Exec::Parallel, Some(n)) = (exec, threads) {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            return pool.install(|| f(exec));
        }
    }
    f(exec)
}
