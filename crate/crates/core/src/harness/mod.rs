//! Metrics, synthetic scenes, toy training and sequence evaluation.

pub mod eval;
pub mod metrics;
pub mod report;
pub mod synth;
pub mod train;

pub use eval::{evaluate_labels, evaluate_sequence, FrameRecord, FrameTimings, SequenceReport};
pub use metrics::{confusion, iou, ConfusionCounts};
pub use report::JsonLines;
pub use synth::{generate_scene, ObjectTrack, SceneSpec, SyntheticScene};
pub use train::{mean_loss, probe_frames, train_toy, training_frame, training_frames, Adam, StepRecord, TrainingFrame};
