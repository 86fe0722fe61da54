//! Data-parallel primitives with a sequential fallback.
//!
//! With the `parallel` feature (on by default) these fan work out over rayon;
//! without it they degrade to plain loops. Both paths produce bitwise
//! identical results: every output element is computed independently from
//! shared read-only inputs and written to a disjoint slot, and ordered
//! reductions stay ordered.
//!
//! Task spawning costs a few tens of microseconds, which dwarfs the work in
//! the small tensors of desk-scale configurations, so each call site gates
//! parallelism on its own work estimate (the `_if` variants).

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `0..n` to a vector, preserving index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_if(true, n, f)
}

/// Map `0..n` to a vector, in parallel only when `parallel` is true (and the
/// feature is enabled).
pub fn map_indexed_if<T, F>(parallel: bool, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel && n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// Apply `f(chunk_index, chunk)` to consecutive chunks of `data`; chunks are
/// disjoint, so `f` may write freely. Totals below ~32k elements run
/// sequentially: see the module note.
pub fn chunks_mut_indexed<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let parallel = data.len() >= 32_768;
    chunks_mut_indexed_if(parallel, data, chunk, f)
}

/// Chunked map with an explicit parallelism decision from the caller.
pub fn chunks_mut_indexed_if<T, F>(parallel: bool, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        if parallel && data.len() > chunk {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = parallel;
    data.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Number of worker threads the parallel build will use.
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
