//! Evaluation: answer metrics, retrieval accuracy, the synthetic
//! domain-shift task, and the multi-scenario comparison harness.

mod harness;
mod metrics;
mod task;

pub use harness::{
    evaluate, index_for_checkpoint, run_comparison, ComparisonConfig, ComparisonTable, EvalReport,
    Scenario, ScenarioRow,
};
pub use metrics::{answer_in_passage, exact_match, f1_score, normalize_answer, top_k_hit};
pub use task::{SyntheticDomainTask, TaskConfig};
