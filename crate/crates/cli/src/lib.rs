//! Command-line front end: config files, runs, verification reports and
//! sweeps.

pub mod config;
pub mod run;
pub mod sweep;
pub mod verify;
