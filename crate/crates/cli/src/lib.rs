//! Command-line front end for the pulse design library: configuration
//! parsing and the design, simulate, gradcheck, eval, and init commands.

pub mod commands;
pub mod config;
