//! Command-line layer over `fscil-core`: experiment configs, the `train`,
//! `search`, `report` and `inspect` commands, and report rendering.

pub mod commands;
pub mod config;
pub mod error;
pub mod inspect;
pub mod report;

pub use commands::{cmd_search, cmd_train, SearchArgs, TrainArgs};
pub use config::{load_config, parse_config, render_config, ExperimentConfig};
pub use error::{exit, CliError, CliResult};
pub use inspect::cmd_inspect;
pub use report::{cmd_report, ReportArgs, ReportBundle};
