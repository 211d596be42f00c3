//! Experiment driver: config parsing, model construction and the
//! `simulate`, `reduce`, `compare` and `bench` commands.

// `!(x > 0.0)` style checks are meant to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod model;
pub mod output;

pub use commands::{cmd_bench, cmd_compare, cmd_reduce, cmd_simulate};
pub use output::RunManifest;
pub use config::{parse_config, parse_config_str, serialize_config, NetworkConfig};
pub use error::CliError;
