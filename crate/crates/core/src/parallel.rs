// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bounded worker pools whose results come back in index order, so output
//! never depends on the number of workers.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Evaluates `f(0..n)` on `workers` threads (`0` = rayon's default) and
/// returns results in index order. The first error by index wins.
pub fn map_indexed<T, F>(workers: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if workers == 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::ThreadPool(e.to_string()))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect::<Vec<_>>())
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_workers() {
        let f = |i: usize| Ok(i * i);
        let one = map_indexed(1, 100, f).unwrap();
        let four = map_indexed(4, 100, f).unwrap();
        assert_eq!(one, four);
        assert_eq!(one[9], 81);
    }

    #[test]
    fn first_error_by_index() {
        let r: Result<Vec<usize>> = map_indexed(4, 50, |i| {
            if i % 10 == 7 {
                Err(Error::InvalidArgument(format!("{i}")))
            } else {
                Ok(i)
            }
        });
        assert!(matches!(r, Err(Error::InvalidArgument(s)) if s == "7"));
    }
}
