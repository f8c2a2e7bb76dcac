pub mod answerkit;
pub mod config;
pub mod engine;
pub mod eval;
pub mod optimizer;
pub mod policy;
pub mod reference;
pub mod reward;
pub mod rng;
pub mod tasks;
pub mod verify;
