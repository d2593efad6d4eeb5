//! Ordered parallel map over independent jobs (seeds, sweep points).
//!
//! Worker count comes from `MTGN_THREADS`, else the machine's parallelism.
//! Results are returned in input order, so output never depends on scheduling.

use rayon::prelude::*;
use rayon::ThreadPoolBuilder;

pub const THREADS_ENV: &str = "MTGN_THREADS";

/// Worker cap from `MTGN_THREADS`; invalid or zero values fall back to the default.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Apply `f` to every item on up to `threads` workers; results keep input order.
pub fn map_ordered<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    if threads <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    match ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| items.into_par_iter().map(f).collect()),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}); running serially");
            items.into_iter().map(f).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..64).collect();
        let serial = map_ordered(xs.clone(), 1, |x| x * x);
        let parallel = map_ordered(xs, 4, |x| x * x);
        assert_eq!(serial, parallel);
        assert_eq!(parallel[7], 49);
    }
}
