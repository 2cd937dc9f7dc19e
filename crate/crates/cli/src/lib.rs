//! Command-line surface, file conversion and synthetic benchmarks for the
//! pointmap workspace.

pub mod bench;
pub mod commands;
pub mod imageio;
pub mod plot;

pub use bench::{run_benchmark, BenchOptions, BenchReport, Suite};
pub use commands::{exit_code, run, Cli};
