//! The `volfuse` command set as a library, so tests can drive it directly.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::*;
pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Caps rayon's pool at `VOLFUSE_THREADS` when set.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("VOLFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| CliError::config(format!("VOLFUSE_THREADS must be a positive integer, got {v:?}")))?;
    if n == 0 {
        return Err(CliError::config("VOLFUSE_THREADS must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::config(e.to_string()))
}
