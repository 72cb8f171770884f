//! Data-parallel helpers. With the `parallel` feature (default) work is spread
//! over the rayon pool; without it everything runs on the calling thread.
//! Results are always returned in index order, so reductions over them are
//! bit-identical either way.

/// `(0..n).map(f)` collected in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_sequential(n, f)
    }
}

/// Execution mode chosen at run time. `Parallel` degrades to sequential when
/// the crate is built without the `parallel` feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Parallel,
    Sequential,
}

pub fn map_indexed_with<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Exec::Parallel => map_indexed(n, f),
        Exec::Sequential => map_indexed_sequential(n, f),
    }
}

/// Sequential reference for [`map_indexed`].
pub fn map_indexed_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Splits `0..len` into contiguous chunks of at most `chunk` items.
pub fn chunk_ranges(len: usize, chunk: usize) -> Vec<(usize, usize)> {
    let chunk = chunk.max(1);
    (0..len.div_ceil(chunk))
        .map(|i| (i * chunk, ((i + 1) * chunk).min(len)))
        .collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_results() {
        let a = map_indexed(1000, |i| i * i);
        let b = map_indexed_sequential(1000, |i| i * i);
        assert_eq!(a, b);
    }

    #[test]
    fn chunking_covers_range() {
        assert_eq!(chunk_ranges(10, 4), vec![(0, 4), (4, 8), (8, 10)]);
        assert!(chunk_ranges(0, 4).is_empty());
    }
}
