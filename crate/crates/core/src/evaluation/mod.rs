//! Experiment protocols: confusion matrices, the original-to-synthetic
//! transfer test, top-n retrieval under distance thresholds, and report
//! rendering.

mod confusion;
mod report;
mod retrieval;

pub use confusion::{confusion, transfer_evaluate, transfer_experiment, ConfusionMatrix, TransferResult};
pub use report::{emit_report, loss_rows, LossRow, ResultsBundle};
pub use retrieval::{
    retrieval_repeated, retrieval_test, select_queries, DistanceMatrix, LabelledId, RetrievalPoint,
    RetrievalStat, RetrievalSummary, DEFAULT_N_MAX, DEFAULT_THRESHOLDS,
};
