//! Parallel execution helpers.
//!
//! Every helper here is bit-deterministic regardless of thread count: maps
//! write disjoint output regions, and reductions split the input at a fixed
//! chunk size and combine the partial results in index order. With the
//! `parallel` feature disabled the same helpers run as plain loops.

/// Fixed chunk length for deterministic reductions.
pub const REDUCE_CHUNK: usize = 1 << 13;

#[cfg(feature = "parallel")]
mod imp {
    use rayon::prelude::*;

    pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync,
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }

    pub fn map_chunks<T, R, F>(data: &[T], chunk: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &[T]) -> R + Sync,
    {
        data.par_chunks(chunk)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect()
    }

    pub fn for_each_index<F>(n: usize, f: F)
    where
        F: Fn(usize) + Sync,
    {
        (0..n).into_par_iter().for_each(f);
    }

    pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        (0..n).into_par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
mod imp {
    pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync,
    {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }

    pub fn map_chunks<T, R, F>(data: &[T], chunk: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &[T]) -> R + Sync,
    {
        data.chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect()
    }

    pub fn for_each_index<F>(n: usize, f: F)
    where
        F: Fn(usize) + Sync,
    {
        for i in 0..n {
            f(i);
        }
    }

    pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        (0..n).map(f).collect()
    }
}

pub use imp::{for_each_chunk_mut, for_each_index, map_chunks, map_indices};

/// Sum with a fixed chunking so the result does not depend on thread count.
pub fn sum_chunked<T: crate::ad::Real>(xs: &[T]) -> T {
    let partials = map_chunks(xs, REDUCE_CHUNK, |_, c| {
        let mut s = T::zero();
        for &x in c {
            s += x;
        }
        s
    });
    let mut total = T::zero();
    for p in partials {
        total += p;
    }
    total
}

/// Dot product with deterministic chunked accumulation.
pub fn dot_chunked<T: crate::ad::Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let n_chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_indices(n_chunks, |ci| {
        let lo = ci * REDUCE_CHUNK;
        let hi = (lo + REDUCE_CHUNK).min(n);
        let mut s = T::zero();
        for i in lo..hi {
            s += a[i] * b[i];
        }
        s
    });
    let mut total = T::zero();
    for p in partials {
        total += p;
    }
    total
}

/// Run `jobs` accumulation jobs that each scatter into a private zeroed
/// buffer of length `len`, then merge the buffers in job order.
pub fn scatter_merge<T, F>(len: usize, jobs: usize, f: F) -> Vec<T>
where
    T: crate::ad::Real,
    F: Fn(usize, &mut [T]) + Sync,
{
    if jobs <= 1 {
        let mut buf = vec![T::zero(); len];
        f(0, &mut buf);
        return buf;
    }
    let bufs = map_indices(jobs, |j| {
        let mut buf = vec![T::zero(); len];
        f(j, &mut buf);
        buf
    });
    let mut out = vec![T::zero(); len];
    for buf in bufs {
        for (o, b) in out.iter_mut().zip(buf) {
            *o += b;
        }
    }
    out
}
