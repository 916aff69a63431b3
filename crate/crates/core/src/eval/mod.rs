//! Metrics and the retrieval, zero-shot, linear and semi-supervised protocols.

mod metrics;
mod protocols;

pub use metrics::{auc_pr, auc_roc, macro_micro_auc, recall_at_k, recall_at_ks, RetrievalIndex};
pub use protocols::{
    fingerprint, linear_eval, pair_softmax, retrieval_indices, retrieval_scores, semi_supervised_eval,
    zero_shot_ihm, zero_shot_probabilities, EvalReport, LinearEvalGrid, RetrievalScores, SemiSupRow, SemiSupSummary,
    SemiSupTable, DEFAULT_ANCHORS, RECALL_KS,
};
