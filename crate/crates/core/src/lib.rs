pub mod baselines;
pub mod dataset;
pub mod eval;
pub mod gateway;
pub mod pipeline;
pub mod prompts;
pub mod runner;
