//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the closures run on the rayon pool; without it
//! they run in order on the calling thread. Reductions always combine
//! per-chunk partial results in chunk order so both builds agree bitwise.

/// Chunk length used by reductions; fixed so results do not depend on the
/// number of worker threads.
pub const REDUCE_CHUNK: usize = 4096;

/// `out[i] = f(i)` for every index.
pub fn fill<T: Send, F>(out: &mut [T], f: F)
where
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_iter_mut().enumerate().for_each(|(i, o)| *o = f(i));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, o) in out.iter_mut().enumerate() {
            *o = f(i);
        }
    }
}

/// Runs `f(row_index, row)` over consecutive chunks of length `len`.
pub fn for_rows<T: Send, F>(data: &mut [T], len: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(len).enumerate().for_each(|(i, r)| f(i, r));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, r) in data.chunks_mut(len).enumerate() {
            f(i, r);
        }
    }
}

/// Maps `f` over `0..n` and collects in index order.
pub fn map_collect<T: Send, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Maximum of `f(i)` over `0..n` (NaN-propagating, 0 for empty ranges).
pub fn max_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let parts = map_collect(chunks, |c| {
        let lo = c * REDUCE_CHUNK;
        let hi = (lo + REDUCE_CHUNK).min(n);
        let mut m = 0.0f64;
        for i in lo..hi {
            let v = f(i);
            if v.is_nan() || v > m {
                m = v;
            }
        }
        m
    });
    parts
        .into_iter()
        .fold(0.0, |m, v| if v.is_nan() || v > m { v } else { m })
}

/// Sum of `f(i)` over `0..n`, chunked in a fixed order.
pub fn sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let parts = map_collect(chunks, |c| {
        let lo = c * REDUCE_CHUNK;
        let hi = (lo + REDUCE_CHUNK).min(n);
        (lo..hi).map(&f).sum::<f64>()
    });
    parts.into_iter().sum()
}

/// Configures the global worker pool. Returns false when the pool was already
/// initialized or the build is sequential.
pub fn init_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}
