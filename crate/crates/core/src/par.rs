//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan work out over rayon; without
//! it they run on the calling thread. Work is always split into the same
//! chunks and results are combined in index order, so outputs never depend on
//! the thread count or on the execution mode.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Runtime switch used by the benches to compare both paths in one build.
pub fn set_sequential(sequential: bool) {
    FORCE_SEQUENTIAL.store(sequential, Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Calls `f(i, chunk)` for each `chunk_len`-sized chunk of `out`.
pub fn for_each_chunk<F>(out: &mut [f32], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() && out.len() > chunk_len {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Two output buffers chunked in lockstep.
pub fn for_each_chunk2<F>(a: &mut [f32], a_len: usize, b: &mut [f32], b_len: usize, f: F)
where
    F: Fn(usize, &mut [f32], &mut [f32]) + Sync + Send,
{
    if a_len == 0 || b_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() && a.len() > a_len {
        use rayon::prelude::*;
        a.par_chunks_mut(a_len)
            .zip(b.par_chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
        return;
    }
    a.chunks_mut(a_len)
        .zip(b.chunks_mut(b_len))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

/// Sums per-group partial buffers computed by `f(group)` in group order.
///
/// `groups` must not depend on the thread count; that keeps the floating
/// point summation order fixed.
pub fn reduce_sum<F>(groups: usize, len: usize, f: F) -> Vec<f32>
where
    F: Fn(usize) -> Vec<f32> + Sync + Send,
{
    let partials = map(groups, f);
    let mut acc = vec![0.0f32; len];
    for p in partials {
        debug_assert_eq!(p.len(), len);
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn reduce_is_mode_independent() {
        let f = |g: usize| (0..8).map(|j| ((g * 8 + j) as f32).sin()).collect();
        let a = reduce_sum(13, 8, f);
        set_sequential(true);
        let b = reduce_sum(13, 8, f);
        set_sequential(false);
        assert_eq!(a, b);
    }
}
