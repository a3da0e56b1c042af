//! Task-conditioned object selection over precomputed embeddings.
//!
//! Given box and image embeddings from a frozen vision-language model and
//! text embeddings of attribute words describing a task, the model
//! recalibrates both embedding spaces, scores every box for suitability,
//! thresholds the scores and optionally propagates positives to boxes of
//! the same detector class. The crate also covers training, threshold
//! calibration, AP evaluation and a synthetic data generator.

pub mod calibration;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod pipeline;
pub mod recalibration;
pub mod scorer;
pub mod synth;
pub mod training;

pub use calibration::{calibrate_tasks, calibrate_threshold, CalibrationResult, SweepPoint};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta};
pub use data::{
    BBox, BoxPrediction, PredictionRecord, Provenance, Report, SceneBox, SceneRecord, TaskReport,
    TaskSet, TaskSpec, Thresholds,
};
pub use error::{CheckpointError, Error, Result};
pub use evaluation::{average_precision, evaluate, iou, mean_ap, Detection, GroundTruth, MatchResult};
pub use pipeline::{predict_all, predict_scene, recalibrate, score, AffinityMatrix, InferenceOptions, Model};
pub use recalibration::{ModelConfig, ModelParams};
pub use scorer::{decide, select_by_grouping, DecisionSet, GroupingConfig, DEFAULT_GROUP_CONF, DEFAULT_THRESHOLD};
pub use synth::{generate, SynthConfig};
pub use training::{optimizer_step, train, AdamState, TrainConfig, TrainOutcome, Trainer};
