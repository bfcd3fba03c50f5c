//! The `cats` command line: train, predict, evaluate and phantoms.

pub mod commands;
pub mod data;
pub mod run;

pub use commands::{evaluate, phantoms, predict, train, PredictArgs};
pub use run::{RunConfig, RunManifest};

use cats_core::{CatsError, Result};

/// Size the global worker pool from `CATS_NUM_THREADS` when it is set.
pub fn configure_threads(value: Option<&str>) -> Result<()> {
    let Some(raw) = value else { return Ok(()) };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CatsError::config("CATS_NUM_THREADS", format!("`{}` is not a positive integer", raw)))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CatsError::config("CATS_NUM_THREADS", e.to_string()))
}
