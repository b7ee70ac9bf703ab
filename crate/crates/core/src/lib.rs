pub mod cli;
pub mod data;
pub mod diffusion;
pub mod grad;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod schedule;
