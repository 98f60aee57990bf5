//! Execution policy for the data-parallel loops.
//!
//! Every parallel loop in the crate has a sequential twin selected by
//! [`Exec`]. Work is split into fixed chunks whose results are combined in
//! index order, so the output never depends on the number of threads.

/// Execution policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    /// Plain loops on the calling thread.
    Sequential,
    /// Rayon's current pool. Falls back to [`Exec::Sequential`] when the
    /// `parallel` feature is disabled.
    #[default]
    Parallel,
}

impl Exec {
    /// `true` when this policy will actually use worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Policy for an explicit worker count: one worker means sequential.
    pub fn for_workers(workers: usize) -> Self {
        if workers <= 1 {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel. Output order is index order.
pub fn map_range<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(exec: Exec, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Element-wise zip of two slices into a new vector.
pub fn zip_map<A, B, T, F>(exec: Exec, a: &[A], b: &[B], f: F) -> Vec<T>
where
    A: Sync,
    B: Sync,
    T: Send,
    F: Fn(&A, &B) -> T + Sync + Send,
{
    assert_eq!(a.len(), b.len());
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return a.par_iter().zip(b.par_iter()).map(|(x, y)| f(x, y)).collect();
    }
    let _ = exec;
    a.iter().zip(b).map(|(x, y)| f(x, y)).collect()
}

/// Sum with a fixed pairwise reduction tree.
///
/// The tree shape depends only on `values.len()`, so the result is the same
/// on every run and for every thread count.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if values.len() <= LEAF {
        let mut s = 0.0;
        for v in values {
            s += v;
        }
        return s;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// [`pairwise_sum`] over `f(i)` for `i in 0..n` without materializing a buffer
/// larger than one leaf.
pub fn pairwise_sum_by<F: Fn(usize) -> f64>(n: usize, f: F) -> f64 {
    fn rec<F: Fn(usize) -> f64>(lo: usize, hi: usize, f: &F) -> f64 {
        const LEAF: usize = 16;
        if hi - lo <= LEAF {
            let mut s = 0.0;
            for i in lo..hi {
                s += f(i);
            }
            return s;
        }
        let mid = lo + (hi - lo) / 2;
        rec(lo, mid, f) + rec(mid, hi, f)
    }
    rec(0, n, &f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_buffered_variant() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(pairwise_sum(&v).to_bits(), pairwise_sum_by(v.len(), |i| v[i]).to_bits());
    }

    #[test]
    fn exec_policies_agree() {
        let a = map_range(Exec::Sequential, 257, |i| i * i);
        let b = map_range(Exec::Parallel, 257, |i| i * i);
        assert_eq!(a, b);

        let mut x = vec![0usize; 100];
        let mut y = vec![0usize; 100];
        for_each_chunk_mut(Exec::Sequential, &mut x, 7, |c, s| s.iter_mut().for_each(|v| *v = c));
        for_each_chunk_mut(Exec::Parallel, &mut y, 7, |c, s| s.iter_mut().for_each(|v| *v = c));
        assert_eq!(x, y);
    }

    #[test]
    fn empty_sum_is_zero() {
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
