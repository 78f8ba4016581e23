//! Grid execution: independent (workload, config) points run in parallel via
//! rayon when the `parallel` feature is on, sequentially otherwise. Output
//! order always matches input order, so results are identical either way.

/// Maps `f` over the items, in parallel when built with the `parallel`
/// feature.
#[cfg(feature = "parallel")]
pub fn map_grid<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Send + Sync,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_grid<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    F: Fn(I) -> O,
{
    items.into_iter().map(f).collect()
}

/// Sequential reference path, always available; the benchmark suite compares
/// it against `map_grid`.
pub fn map_grid_sequential<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    F: Fn(I) -> O,
{
    items.into_iter().map(f).collect()
}
