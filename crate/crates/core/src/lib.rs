//! Symbolic regression toolkit: expression trees, synthetic example
//! generation, hybrid symbolic-numeric tokenization, BFGS constant
//! refinement, evaluation metrics and the scaling/bagging inference pipeline.

pub mod dataset;
pub mod expr;
pub mod generator;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod skeletons;
pub mod tokenizer;

pub use expr::{skeletonize, BinaryOp, Expr, OperatorTable, Skeleton, UnaryOp};
pub use generator::{GeneratorConfig, SampleSet};
pub use pipeline::{CandidateDecoder, PipelineConfig, PipelineMode};
pub use tokenizer::{EncodeMode, TokenSeq, Vocab};
