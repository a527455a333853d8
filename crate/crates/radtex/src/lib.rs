//! Files, experiments and the command line around [`radtex_core`].
//!
//! - [`io`]: PGM images, dataset directories, vocabulary, checkpoint and
//!   loss-log files.
//! - [`config`]: JSON defaults, config files and flag overrides.
//! - [`bench`]: downstream trials, confidence intervals and the
//!   label-efficiency experiment grid.
//! - [`plot`]: SVG figures of experiment results.

pub mod bench;
pub mod config;
mod error;
pub mod io;
pub mod plot;

pub use error::{Error, Result};
pub use radtex_core as core;

/// Worker count: explicit value, then `RADTEX_THREADS`, then the number of
/// available cores.
pub fn thread_count(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var("RADTEX_THREADS").ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
