//! Three differently configured networks voting per pixel, and their
//! training.

mod bundle;
mod train;
mod vote;

pub use bundle::{
    stored_precision, train_bundle, BundlePath, BundlePlan, EnsembleBundle, Prediction, ABLATION_KIND,
    BUNDLE_FILE, ENSEMBLE_KIND,
};
pub use train::{
    mean_nucleus_zsi, prepare, train_path, EpochLog, OptimizerKind, Prepared, TrainConfig,
    TrainedPath,
};
pub use vote::{
    argmax_labels, fuse_nuclei, majority_vote, majority_vote_counts, vote_pixel, Vote, PATHS,
};
