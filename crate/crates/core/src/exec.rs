//! Chunked map over index ranges.
//!
//! With the `parallel` feature chunks run on the rayon pool; otherwise they
//! run in order on the calling thread. Results come back in chunk order in
//! both cases, so reductions over them are bit-reproducible for a fixed
//! chunk size.

use std::cell::Cell;
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with chunked maps on this thread forced to [`Mode::Sequential`].
pub fn with_mode<T>(mode: Mode, f: impl FnOnce() -> T) -> T {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(mode == Mode::Sequential));
    let out = f();
    FORCE_SEQUENTIAL.with(|c| c.set(prev));
    out
}

pub fn current_mode() -> Mode {
    if cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|c| c.get()) {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Splits `0..len` into consecutive ranges of at most `chunk` items.
pub fn chunk_ranges(len: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..len.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(len))
        .collect()
}

/// Applies `f` to each chunk of `0..len`, returning results in chunk order.
pub fn map_chunks<T, F>(len: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    map_items(chunk_ranges(len, chunk), f)
}

/// Applies `f` to each item, returning results in input order.
pub fn map_items<I, T, F>(items: Vec<I>, f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(I) -> T + Sync + Send,
{
    match current_mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => {
            use rayon::prelude::*;
            items.into_par_iter().map(f).collect()
        }
        _ => items.into_iter().map(f).collect(),
    }
}

/// Applies `f(chunk_index, chunk)` to consecutive chunks of `data` of
/// length `chunk` (the last may be shorter).
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    match current_mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }
        _ => data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_without_overlap() {
        let r = chunk_ranges(10, 4);
        assert_eq!(r, vec![0..4, 4..8, 8..10]);
        assert!(chunk_ranges(0, 4).is_empty());
    }

    #[test]
    fn modes_agree() {
        let f = |r: Range<usize>| r.map(|i| (i as f64).sqrt()).sum::<f64>();
        let a = with_mode(Mode::Sequential, || map_chunks(1000, 37, f));
        let b = map_chunks(1000, 37, f);
        assert_eq!(a, b);
    }
}
