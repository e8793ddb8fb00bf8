//! Library side of the `driftnav` binary, so the commands can be tested
//! without spawning processes.

pub mod commands;
pub mod config;
