//! Differentially private sequence-to-sequence training.

pub mod accountant;
pub mod corpus;
pub mod evaluation;
pub mod exec;
pub mod harness;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod sampling;
pub mod tensor;
