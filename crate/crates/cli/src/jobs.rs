use rayon::{ThreadPool, ThreadPoolBuilder};

use crate::error::CliError;

/// Environment variable that overrides the `--jobs` flag.
pub const JOBS_ENV: &str = "LANE_SENTINEL_JOBS";

/// Worker count resolution: `LANE_SENTINEL_JOBS` beats `--jobs` beats the
/// machine's available parallelism. Zero or garbage in the variable is
/// rejected rather than silently ignored.
pub fn resolve_jobs(flag: Option<usize>) -> Result<usize, CliError> {
    if let Ok(raw) = std::env::var(JOBS_ENV) {
        let n: usize = raw
            .parse()
            .map_err(|_| CliError::Arg(format!("{JOBS_ENV}={raw:?} is not a number")))?;
        if n == 0 {
            return Err(CliError::Arg(format!("{JOBS_ENV} must be >= 1")));
        }
        return Ok(n);
    }
    if let Some(n) = flag {
        if n == 0 {
            return Err(CliError::Arg("--jobs must be >= 1".into()));
        }
        return Ok(n);
    }
    Ok(std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1))
}

/// A dedicated pool so worker count is explicit rather than whatever the
/// global rayon default picked up. All parallel loops in the commands are
/// order-preserving maps, so results do not depend on the worker count.
pub fn build_pool(jobs: usize) -> Result<ThreadPool, CliError> {
    ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Arg(format!("thread pool: {e}")))
}
