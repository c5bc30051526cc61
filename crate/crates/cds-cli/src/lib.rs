//! IO companion to `cds-core`: the experiment config schema, the on-disk
//! formats for datasets, banks, models, and metrics, and the command
//! implementations behind the `cds` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
