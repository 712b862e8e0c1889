//! MotionNet, the instance detection branch, the upsample fusion decoder
//! and the forward pipeline tying them together.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod fusion;
pub mod instance;
pub mod layers;
pub mod motion;
pub mod params;
pub mod pipeline;
pub mod pyramid;

pub use checkpoint::Checkpoint;
pub use config::{instance_feature_width, DecodeConfig, NetworkConfig};
pub use decode::decode_instances;
pub use fusion::upsample_fusion_forward;
pub use instance::{instance_forward, HeatmapSet, InstanceInput, InstanceOutput};
pub use layers::{sigmoid, Activation, Conv2dParams};
pub use motion::{motionnet_forward, occupancy};
pub use params::{init_params, Params};
pub use pipeline::{
    align_window, forward_backward, frame_loss, pipeline_forward, predict_labels, prepare_frame, ForwardOutput, FrameInput,
    FrameTargets, LossConfig, MovingLabels, PointLogits, StageTimings,
};
pub use pyramid::{build_instance_pyramid, instance_features};
