pub mod backend;
pub mod callgraph;
pub mod confidence;
pub mod inline;
pub mod lexer;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod pyast;
pub mod retrieval;
pub mod source;
pub mod task;

pub use callgraph::{build_call_graph, CallGraph, CallSite};
pub use confidence::{perplexity, ConfidenceLevel, TokenLogProbs};
pub use inline::{inline_draft_into_callers, InlineMode, InlineOptions, InlinedContext, TargetSpec};
pub use pipeline::{run_batch, Config, RunContext};
pub use retrieval::{retrieve_callees, QuerySet, RetrievedSet};
pub use source::{index_repository, FunctionUnit, Repository};
pub use task::TaskRecord;
