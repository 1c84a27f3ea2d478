//! Data-parallel helpers. With the `parallel` feature these dispatch to rayon;
//! without it they run the identical per-item closures sequentially.
//!
//! Every helper assigns each output slot to exactly one closure call and never
//! reduces across threads, so results are bitwise identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows below this count are processed inline.
#[cfg(feature = "parallel")]
const MIN_PAR_ROWS: usize = 64;

/// Calls `f(row_index, row)` for every `row_len`-sized chunk of `out`.
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if out.len() / row_len >= MIN_PAR_ROWS {
            out.par_chunks_mut(row_len)
                .with_min_len(MIN_PAR_ROWS / 4)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    out.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Ordered map over `0..n`.
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

/// Ordered map over a slice.
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
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_cover_output_once() {
        let mut out = vec![0.0; 300 * 3];
        for_each_row(&mut out, 3, |i, row| {
            for (j, v) in row.iter_mut().enumerate() {
                *v += (i * 3 + j) as f64;
            }
        });
        assert!(out.iter().enumerate().all(|(k, &v)| v == k as f64));
    }

    #[test]
    fn maps_preserve_order() {
        assert_eq!(map_range(5, |i| i * i), vec![0, 1, 4, 9, 16]);
        assert_eq!(map_slice(&[3, 1, 2], |&v| v + 1), vec![4, 2, 3]);
    }
}
