//! Continual tool-use evaluation harness.
//!
//! Builds a stream of disjoint-API domain blocks from a dialogue corpus,
//! renders next-call prompts with the API trace stripped (condition A) or
//! kept (condition B), scores completions with a strict call parser, and
//! reduces the stage × block accuracy matrices to continual-learning
//! statistics.

pub mod callparse;
pub mod clmetrics;
pub mod corpus;
pub mod error;
pub mod genclient;
pub mod report;
pub mod scorer;
pub mod transform;

pub use callparse::{normalize_params, parse_first_call, render_call, ApiCall, ParseFailure};
pub use corpus::{DomainBlock, Episode, ScoredExample, Turn};
pub use error::HarnessError;
pub use scorer::{classify_error, score_example, ErrorCategory, MetricFlags};
pub use transform::Condition;
