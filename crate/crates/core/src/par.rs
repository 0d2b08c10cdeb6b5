//! Data-parallel fan-out with a sequential fallback.
//!
//! The workloads here are embarrassingly parallel across examples (batch
//! gradients, batch generation, per-sample metrics). With the `parallel`
//! feature (default) the mapping runs on the rayon pool; without it, or via
//! [`seq_map`], it runs sequentially. Both preserve input order, so
//! reductions that fold results in order are deterministic either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Order-preserving map over items, parallel when the `parallel` feature is
/// enabled.
#[cfg(feature = "parallel")]
pub fn par_map<T: Sync, R: Send, F: Fn(&T) -> R + Send + Sync>(items: &[T], f: F) -> Vec<R> {
    items.par_iter().map(f).collect()
}

/// Order-preserving map over items; sequential build.
#[cfg(not(feature = "parallel"))]
pub fn par_map<T: Sync, R: Send, F: Fn(&T) -> R + Send + Sync>(items: &[T], f: F) -> Vec<R> {
    seq_map(items, f)
}

/// Always-sequential map; the benchmark suite compares this against
/// [`par_map`].
pub fn seq_map<T, R, F: Fn(&T) -> R>(items: &[T], f: F) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Configure the global worker pool. A size of 1 (the CLI default) keeps
/// runs strictly single-threaded; results are identical either way because
/// all reductions are order-preserving.
pub fn set_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        // Ignore the error if a pool was already built for this process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_preserve_order() {
        let items: Vec<u64> = (0..100).collect();
        let a = par_map(&items, |x| x * 2);
        let b = seq_map(&items, |x| x * 2);
        assert_eq!(a, b);
    }
}
