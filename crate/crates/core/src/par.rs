//! Execution strategy for the data-parallel loops.
//!
//! Every parallel loop in the crate goes through [`map_indexed`]. Each item is
//! computed by the same sequential code in both modes and results are
//! collected in index order, so sequential and parallel runs are
//! bit-identical. Without the `parallel` feature, [`Exec::Parallel`] falls
//! back to the sequential path.

/// Work below this many scalar multiply-adds stays on the calling thread.
pub const PAR_MIN_WORK: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Downgrades to sequential when the estimated work is too small to split.
    pub fn for_work(self, work: usize) -> Exec {
        if work < PAR_MIN_WORK {
            Exec::Sequential
        } else {
            self
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// `(0..n).map(f).collect()`, possibly spread over the rayon pool.
pub fn map_indexed<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if exec == Exec::Parallel && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Fills `out` in chunks of `chunk` elements; `f(chunk_index, chunk_slice)`.
pub fn for_each_chunk<F>(exec: Exec, out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if exec == Exec::Parallel && out.len() > chunk {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = exec;
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        assert_eq!(
            map_indexed(Exec::Sequential, 1000, f),
            map_indexed(Exec::Parallel, 1000, f)
        );
    }

    #[test]
    fn small_work_stays_sequential() {
        assert_eq!(Exec::Parallel.for_work(10), Exec::Sequential);
    }
}
