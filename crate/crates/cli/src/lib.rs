//! Command-line front end: run configuration, run directories, figures and
//! the train / evaluate / ablate / noise-viz commands.

pub mod commands;
pub mod config;
pub mod figures;
pub mod rundir;
