//! Opt-in intra-op parallelism.
//!
//! The default is the fully serial reference path. Calling [`set_threads`]
//! with n > 1 builds a dedicated rayon pool that kernels use to split work
//! over *disjoint output regions only* — every thread writes its own slice
//! of the output buffer and no reduction order ever changes. Results are
//! therefore bit-identical for any thread count.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

static THREADS: AtomicUsize = AtomicUsize::new(1);
static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Configure the worker count. Must be called before the first parallel
/// kernel runs; later calls only take effect if the pool was never built.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads())
            .build()
            .expect("rayon pool")
    })
}

/// Run `job` on contiguous chunks of `out`, one call per chunk, in parallel
/// when enabled. `job(chunk_index, chunk)` must derive everything it needs
/// from the chunk index, so the split is purely a work partition.
pub fn for_each_chunk<E: Send, F>(out: &mut [E], chunk: usize, job: F)
where
    F: Fn(usize, &mut [E]) + Send + Sync,
{
    assert!(chunk > 0);
    if threads() <= 1 || out.len() <= chunk {
        for (i, c) in out.chunks_mut(chunk).enumerate() {
            job(i, c);
        }
    } else {
        use rayon::prelude::*;
        pool().install(|| {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| job(i, c));
        });
    }
}

/// Parallel loop over an index range with no shared output; used where each
/// iteration owns an independent buffer.
pub fn for_each_index<F>(n: usize, job: F)
where
    F: Fn(usize) + Send + Sync,
{
    if threads() <= 1 || n <= 1 {
        for i in 0..n {
            job(i);
        }
    } else {
        use rayon::prelude::*;
        pool().install(|| (0..n).into_par_iter().for_each(job));
    }
}

/// Consume a vector of independent work items (typically pre-split mutable
/// slices) in parallel.
pub fn scope_for_each<T: Send, F>(items: Vec<T>, job: F)
where
    F: Fn(T) + Send + Sync,
{
    if threads() <= 1 || items.len() <= 1 {
        for it in items {
            job(it);
        }
    } else {
        use rayon::prelude::*;
        pool().install(|| items.into_par_iter().for_each(job));
    }
}
