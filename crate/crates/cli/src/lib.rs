//! Pipeline driver behind the `coverbias` command.

pub mod config;
pub mod pipeline;
pub mod report;

use coverbias::{Error, ErrorKind};

pub use config::{Overrides, RunConfig};
pub use pipeline::run_pipeline;

/// Process exit code for an error: 2 schema, 3 domain, 4 degenerate input.
pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Schema => 2,
        ErrorKind::Domain => 3,
        ErrorKind::Degenerate => 4,
    }
}

/// Size the global worker pool from `COVERBIAS_THREADS` when it is set.
pub fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("COVERBIAS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Schema(format!("COVERBIAS_THREADS=`{raw}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Domain(format!("thread pool: {e}")))
}
