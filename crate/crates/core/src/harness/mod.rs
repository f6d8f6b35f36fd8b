//! Synthetic data generation, experiment drivers, and the bound-verification suite.

pub mod checks;
pub mod experiments;
pub mod synth;

pub use experiments::{
    resolve_threads, run_kl_sweep, run_suite, run_tradeoff, with_threads, write_rows, ExperimentConfig,
    ExperimentRow, SuiteOutput, THREADS_ENV,
};
pub use synth::{generate_synthetic, log_grid, SynthConfig};
