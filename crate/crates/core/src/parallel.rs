//! Data-parallel loop helpers.
//!
//! Every parallel loop in the engine splits its output into disjoint chunks
//! and runs a fixed sequential reduction inside each chunk, so the result is
//! bit-identical to the sequential build regardless of worker count.
//!
//! `DCE_THREADS` caps the worker count of the global pool; it must be read
//! before the first parallel call (the CLI does this at startup via
//! [`init_threads`]).

/// Configure the global worker pool from the `DCE_THREADS` environment
/// variable. No-op when the variable is unset, invalid, or the pool was
/// already initialized, and in sequential builds.
pub fn init_threads() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(raw) = std::env::var("DCE_THREADS") {
            if let Ok(n) = raw.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    }
}

/// Apply `f` to every `chunk`-sized slice of `data`, indexed in order.
/// The final chunk may be shorter.
#[cfg(feature = "parallel")]
pub fn par_chunks_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn par_chunks_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Fill `out[i]` with `f(i)` for every index, in parallel.
#[cfg(feature = "parallel")]
pub fn par_fill<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    use rayon::prelude::*;
    out.par_iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
}

#[cfg(not(feature = "parallel"))]
pub fn par_fill<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    for (i, v) in out.iter_mut().enumerate() {
        *v = f(i);
    }
}
