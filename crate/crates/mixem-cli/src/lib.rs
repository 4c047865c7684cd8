//! Library surface of the experiment front-end; the `mixem` binary is a
//! thin wrapper over these modules.

pub mod commands;
pub mod config;
