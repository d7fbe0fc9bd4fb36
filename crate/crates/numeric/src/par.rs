//! Order-preserving data-parallel helpers.
//!
//! With the `parallel` feature these fan out over rayon; without it they run
//! the same closures serially. Results always come back in index order and
//! every reduction in this crate folds them left to right, so both builds
//! produce bit-identical numbers.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `f(0), f(1), ..., f(n-1)` collected in order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
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
        serial::map_indexed(n, f)
    }
}

/// Maps over a slice, preserving order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        serial::map_slice(items, f)
    }
}

/// True when the crate was built with rayon fan-out.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// The same helpers without fan-out, available in every build.
pub mod serial {
    pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
    where
        F: Fn(usize) -> T,
    {
        (0..n).map(f).collect()
    }

    pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
    where
        F: Fn(&S) -> T,
    {
        items.iter().map(f).collect()
    }
}
