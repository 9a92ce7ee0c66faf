//! File formats and subcommands of the `sdgan` tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod plot;
