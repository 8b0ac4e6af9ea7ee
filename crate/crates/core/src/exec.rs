//! Data-parallel helpers.
//!
//! Every reduction here is computed over fixed-size chunks whose partial
//! results are combined in chunk order, so the output is bitwise identical
//! for any worker count. Without the `parallel` feature the same chunking is
//! run sequentially.

use std::ops::Range;

/// Number of paths per reduction chunk.
pub const CHUNK: usize = 256;

/// Runs `f` with at most `workers` threads. `None` uses the global pool.
#[cfg(feature = "parallel")]
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match workers {
        None => f(),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .expect("thread pool construction");
            pool.install(f)
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<R: Send>(_workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    f()
}

/// Whether this build runs path loops on a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Calls `f(chunk_index, chunk)` on consecutive `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
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

/// Fallible variant of [`for_each_chunk_mut`]; returns the first error in chunk order.
pub fn try_for_each_chunk_mut<T, E, F>(data: &mut [T], chunk_len: usize, f: F) -> Result<(), E>
where
    T: Send,
    E: Send,
    F: Fn(usize, &mut [T]) -> Result<(), E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    let results: Vec<Result<(), E>> = {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(), E>> = data
        .chunks_mut(chunk_len)
        .enumerate()
        .map(|(i, c)| f(i, c))
        .collect();
    results.into_iter().collect()
}

/// Maps fixed chunks of `0..len` to partial results, returned in chunk order.
pub fn map_chunks<A, F>(len: usize, chunk_len: usize, f: F) -> Vec<A>
where
    A: Send,
    F: Fn(Range<usize>) -> A + Sync + Send,
{
    let chunks = len.div_ceil(chunk_len);
    let range = |i: usize| i * chunk_len..((i + 1) * chunk_len).min(len);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..chunks).into_par_iter().map(|i| f(range(i))).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..chunks).map(|i| f(range(i))).collect()
    }
}

/// Element-wise sum of per-chunk vectors, combined in chunk order.
pub fn sum_vectors<F>(len: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(Range<usize>, &mut [f64]) + Sync + Send,
{
    let partials = map_chunks(len, CHUNK, |r| {
        let mut acc = vec![0.0; width];
        f(r, &mut acc);
        acc
    });
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Scalar mean of `f(i)` over `0..len` with a fixed reduction order.
pub fn mean_of<F>(len: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let s = sum_vectors(len, 1, |r, acc| {
        for i in r {
            acc[0] += f(i);
        }
    });
    s[0] / len as f64
}

/// Mean and sample variance of `f(i)` over `0..len`.
pub fn mean_var_of<F>(len: usize, f: F) -> (f64, f64)
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let mean = mean_of(len, &f);
    if len < 2 {
        return (mean, 0.0);
    }
    let ss = sum_vectors(len, 1, |r, acc| {
        for i in r {
            let d = f(i) - mean;
            acc[0] += d * d;
        }
    });
    (mean, ss[0] / (len - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reductions_do_not_depend_on_workers() {
        let f = |i: usize| ((i as f64) * 0.37).sin() * 1e3;
        let a = with_workers(Some(1), || mean_var_of(10_000, f));
        let b = with_workers(Some(3), || mean_var_of(10_000, f));
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }

    #[test]
    fn chunks_cover_range_in_order() {
        let parts = map_chunks(1000, 300, |r| (r.start, r.end));
        assert_eq!(parts, vec![(0, 300), (300, 600), (600, 900), (900, 1000)]);
    }
}
