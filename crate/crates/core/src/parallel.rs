//! Data-parallel helpers. With the `parallel` feature the loops run on the
//! rayon pool; without it (or inside [`run_sequential`]) they run in order on
//! the calling thread. Every helper hands each closure invocation a disjoint
//! output slot, so results never depend on the schedule.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with all helpers on this thread pinned to the sequential path.
pub fn run_sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let out = f();
    FORCE_SEQUENTIAL.with(|c| c.set(prev));
    out
}

#[cfg(feature = "parallel")]
fn use_rayon() -> bool {
    !FORCE_SEQUENTIAL.with(|c| c.get())
}

/// Calls `f(i, chunk)` for each consecutive `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if use_rayon() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `0..n` through `f`, returning results in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if use_rayon() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Fallible variant of [`map_indices`]; the first error in index order wins.
pub fn try_map_indices<R, E, F>(n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    map_indices(n, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_see_their_index() {
        let mut v = vec![0usize; 12];
        for_each_chunk(&mut v, 4, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let par = map_indices(1000, f);
        let seq = run_sequential(|| map_indices(1000, f));
        assert_eq!(par, seq);
    }
}
