//! Library half of the `kline` command: run configuration, CSV ingest and
//! checkpoint files.

pub mod artifacts;
pub mod checkpoint;
pub mod config;
pub mod io;
