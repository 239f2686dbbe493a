//! Experiment driver for the `lsfd` binary: JSON experiment specs, the six
//! benchmark modes, figure presets, CSV/JSON export and the verification suite.

pub mod checks;
pub mod error;
pub mod experiment;
pub mod export;
pub mod presets;
pub mod spec;

pub use error::{CliError, CliResult};

/// Environment variable that redirects every output file into one directory.
pub const OUTPUT_DIR_ENV: &str = "LSFD_OUTPUT_DIR";
