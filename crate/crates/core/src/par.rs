//! Thin layer over rayon so every data-parallel loop has a sequential twin.
//!
//! `workers == 1` always runs sequentially. `workers == 0` uses the current
//! rayon pool. Any other value runs inside a dedicated pool of that size.
//! Results are always collected in index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows below this count are processed sequentially inside [`map_rows`].
pub const ROW_PAR_THRESHOLD: usize = 2048;

pub fn map_indexed<T, F>(len: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        match workers {
            1 => (0..len).map(f).collect(),
            0 => (0..len).into_par_iter().map(f).collect(),
            w => match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
                Ok(pool) => pool.install(|| (0..len).into_par_iter().map(&f).collect()),
                Err(e) => {
                    log::warn!("could not build a {w}-thread pool ({e}); running sequentially");
                    (0..len).map(f).collect()
                }
            },
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        (0..len).map(f).collect()
    }
}

/// Fills `out[j] = f(j)`, in parallel on the current pool for large outputs.
pub fn map_rows<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if out.len() >= ROW_PAR_THRESHOLD {
            out.par_iter_mut().enumerate().for_each(|(j, o)| *o = f(j));
            return;
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        *o = f(j);
    }
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
