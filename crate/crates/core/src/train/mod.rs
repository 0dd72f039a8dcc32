//! Training loop, random search and evaluation statistics.

mod fit;
mod metrics;
mod search;

pub use fit::{
    evaluate, model_inputs, predict, train_model, Augment, EpochRecord, Hparams, StopReason,
    TrainOutcome,
};
pub use metrics::{
    balanced_accuracy, probability_of_improvement, report_stats, RunStats, MIN_RUNS_FOR_STD,
};
pub use search::{random_search, SearchResult, SearchSpace, Trial};
