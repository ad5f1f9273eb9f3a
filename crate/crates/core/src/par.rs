//! Data-parallel dispatch. With the `parallel` feature (default) inner loops
//! fan out over rayon; without it the same code runs sequentially. Every
//! helper preserves element-level evaluation order inside each chunk, so
//! results are bit-identical across both modes and any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to each `row_len`-sized chunk of `data`, indexed by chunk number.
pub fn for_each_chunk_mut<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(row_len > 0 && data.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, chunk) in data.chunks_mut(row_len).enumerate() {
            f(i, chunk);
        }
    }
}

/// Sequential version of [`for_each_chunk_mut`], always available; the
/// benches compare the two.
pub fn for_each_chunk_mut_seq<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    debug_assert!(row_len > 0 && data.len() % row_len == 0);
    for (i, chunk) in data.chunks_mut(row_len).enumerate() {
        f(i, chunk);
    }
}

/// Map `f` over `0..n`, collecting results in index order. Used for
/// batch-item and candidate-level parallelism; `parallel: false` forces a
/// sequential loop regardless of the feature flag so runs can be compared.
pub fn map_indexed<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    (0..n).map(f).collect()
}
