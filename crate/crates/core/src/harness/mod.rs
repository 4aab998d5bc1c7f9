//! Experiment plumbing: configs and presets, file formats, problem
//! generation, reports, sweeps and the command line.

pub mod ablate;
pub mod cli;
pub mod config;
pub mod imageio;
pub mod problem;
pub mod report;
pub mod tensorio;

pub use config::{derive_seed, ExperimentConfig};
pub use problem::{generate_problem, Problem};
pub use report::{run_solve, solve_report, Report};
