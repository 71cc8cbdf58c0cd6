//! Training, evaluation and ablation runs.
//!
//! A run trains on a fixed pool of generated scenes (derived from the run
//! seed), evaluates the deployed prediction set on held-out scenes and writes
//! a checkpoint, a loss CSV and a JSON run record. Everything is single
//! threaded and bit-reproducible for a fixed configuration.

mod ablate;
pub mod checkpoint;
mod config;
mod optim;
mod train;

pub use ablate::{ablate, median, run_key, AblationRow, AblationTable, Axis};
pub use config::{parse_mode, RunConfig};
pub use optim::AdamW;
pub use train::{
    evaluate, evaluate_store, fit, losses_csv, objective, predict_sample, scene_loss, scene_seed, scenes, train,
    RunRecord, Sample, SceneLoss, Split, StepLoss, Trained, CHECKPOINT_FILE, CONFIG_FILE, LOSSES_FILE, LOSS_CSV_HEADER,
    RECORD_FILE,
};
