//! File formats, configuration, synthetic tasks, experiment drivers and the
//! command-line front end around `sparsevl-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod experiment;
pub mod task;
pub mod trace;
pub mod verify;
