//! Pretext and transfer evaluation: puzzle accuracy, layer-locking
//! transfer, activation ranking, and feature retrieval.
//!
//! Ties are broken by ascending item id everywhere.

mod accuracy;
mod activations;
mod retrieval;
mod transfer;

pub use accuracy::{puzzle_accuracy, OracleSolver, PuzzleSolver};
pub use activations::{top_activations, Patch};
pub use retrieval::{pr_to_csv, precision_recall, ranking_to_text, retrieve, FeatureIndex, PrPoint, Ranked};
pub use transfer::{
    branch_features, default_feature_layer, transfer_lock_and_retrain, LockSpec, TransferConfig, TransferOutcome,
    DETECTION_FILL,
};
