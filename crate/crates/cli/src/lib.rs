//! Configuration, run directories and the commands behind the `acdc` binary.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod report;
pub mod rundir;

pub use error::{CliError, Result};

use acdc_core::exec::Exec;

/// Execution strategy for `--jobs`: one job runs sequentially; more size the
/// global thread pool (only the first call can size it).
pub fn exec_for_jobs(jobs: Option<usize>) -> Exec {
    match jobs {
        Some(1) => Exec::Sequential,
        Some(n) => {
            #[cfg(feature = "parallel")]
            {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            let _ = n;
            Exec::Parallel
        }
        None => Exec::Parallel,
    }
}
