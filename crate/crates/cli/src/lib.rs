//! Evaluation harness and shared plumbing for the `symreg` command line.

pub mod harness;
pub mod io;

pub use harness::{
    evaluate_problem, evaluate_suite, generate_problem, MetricsReport, PerturbedOracleDecoder,
    Problem, ProblemRecord, RandomExprDecoder, SuiteProtocol,
};
