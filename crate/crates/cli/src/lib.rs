//! Configuration, orchestration and CSV output for the `pphom` binary.

pub mod commands;
pub mod config;
pub mod table;

pub use commands::{run_command, Command, Outcome};
pub use config::{parse_config, ConfigError, RunConfig};
pub use table::{write_csv, Table, Value};
