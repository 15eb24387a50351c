//! Built-in environments, experiment runs, and the verification suite behind the CLI.

pub mod config;
pub mod envs;
pub mod experiment;
pub mod model_io;
pub mod random;
pub mod verify;
