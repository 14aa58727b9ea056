//! Data-parallel helpers. With the `parallel` feature these dispatch to
//! rayon; without it they run sequentially. Results never depend on the
//! number of worker threads: reductions use fixed-size chunks combined in
//! index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length for deterministic reductions.
pub const REDUCE_CHUNK: usize = 512;

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Fill `out` in fixed-width rows: `f(i, &mut out[i*width..(i+1)*width])`.
pub fn fill_rows<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// Sum of `f(i)` over `0..n`. Each chunk of [`REDUCE_CHUNK`] indices is
/// accumulated sequentially; chunk partials are then summed in order.
pub fn chunked_sum<T, F, A>(n: usize, zero: impl Fn() -> T + Sync + Send, f: F, add: A) -> T
where
    T: Send,
    F: Fn(&mut T, usize) + Sync + Send,
    A: Fn(&mut T, &T) + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partials: Vec<T> = map_range(chunks, |c| {
        let mut acc = zero();
        let start = c * REDUCE_CHUNK;
        let end = (start + REDUCE_CHUNK).min(n);
        for i in start..end {
            f(&mut acc, i);
        }
        acc
    });
    let mut total = zero();
    for p in &partials {
        add(&mut total, p);
    }
    total
}
