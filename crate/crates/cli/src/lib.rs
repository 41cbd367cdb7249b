//! Command-line front end: generation, training, inference, evaluation,
//! the variant ablation and the disparity-to-depth error analysis.

pub mod commands;
pub mod config;
pub mod dataset;

use depthsweep::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Process exit code for a failure.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Domain(_) | Error::Argument(_) | Error::Format { .. } | Error::Io { .. } | Error::Image(_) | Error::Csv(_) => {
            EXIT_DATA
        }
    }
}

/// Sizes the global worker pool. `None` keeps the default of one worker per
/// core. Fails if the pool was already built with a different size.
pub fn init_threads(threads: Option<usize>) -> Result<(), Error> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .or_else(|e| {
            if rayon::current_num_threads() == n {
                Ok(())
            } else {
                Err(Error::Config(format!("cannot size thread pool: {e}")))
            }
        })
}
