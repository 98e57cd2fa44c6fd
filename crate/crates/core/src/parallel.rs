//! Order-preserving parallel map, falling back to a serial loop when the
//! `parallel` feature is disabled. Results always come back in input order,
//! so reductions over them are deterministic regardless of thread count.

#[cfg(feature = "parallel")]
pub(crate) fn ordered_map<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(&T) -> R + Sync + Send,
) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn ordered_map<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}
