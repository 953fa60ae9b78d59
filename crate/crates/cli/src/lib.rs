//! Experiment driver behind the `seld` binary: config handling, dataset
//! and feature-cache layout, and one function per pipeline stage.

pub mod commands;
pub mod config;
pub mod dataset;

/// Order-preserving map over scenes on the worker pool.
pub fn par_map<T, O, F>(items: &[T], f: F) -> anyhow::Result<Vec<O>>
where
    T: Sync,
    O: Send,
    F: Fn(&T) -> anyhow::Result<O> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
