//! Data-parallel helpers.
//!
//! Every helper partitions work so that each output element is produced by
//! exactly one task with a fixed accumulation order, so the rayon path and the
//! sequential fallback give bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of worker threads the parallel helpers will use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Whether this build dispatches to rayon.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Rows per task so that each task does at least ~`min_work` scalar operations.
pub fn rows_per_task(rows: usize, work_per_row: usize, min_work: usize) -> usize {
    let by_work = min_work.div_ceil(work_per_row.max(1)).max(1);
    let by_threads = rows.div_ceil(threads() * 4).max(1);
    by_work.max(by_threads).min(rows.max(1))
}

/// Calls `f(chunk_index, chunk)` for consecutive chunks of `chunk_len` elements.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

/// Maps `0..n` through `f`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Maps a slice through `f`, preserving order.
pub fn map_slice<A, R, F>(items: &[A], f: F) -> Vec<R>
where
    A: Sync,
    R: Send,
    F: Fn(&A) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
