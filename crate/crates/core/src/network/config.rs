use serde::{Deserialize, Serialize};

use super::layers::Activation;
use crate::error::{Error, Result};
use crate::sparse::BevGrid;

/// Width of the per-voxel instance features: class one-hot, score, offset.
pub fn instance_feature_width(num_classes: usize) -> usize {
    num_classes + 4
}

/// Width of the raw per-point input of the instance branch:
/// `[x, y, z, intensity, f1, f2, f3]`.
pub const POINT_INPUT_WIDTH: usize = 7;
pub const MOTION_FEATURE_WIDTH: usize = 3;
pub const NUM_POINT_CLASSES: usize = 3;

/// Architecture of the three sub-networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// MotionNet widths per level, `motion_levels + 1` entries.
    pub motion_channels: Vec<usize>,
    /// Down/up sampling levels of the MotionNet hourglass.
    pub motion_levels: usize,
    pub motion_kernel: [usize; 4],
    /// Instance branch widths, one per stage.
    pub inst_channels: Vec<usize>,
    /// Spatial stride of each instance stage; time is never strided.
    pub inst_strides: Vec<usize>,
    pub inst_kernel: [usize; 4],
    /// Fusion decoder widths per level; entry 0 is the full voxel resolution
    /// and entry `k + 1` matches instance stage `k`.
    pub fusion_channels: Vec<usize>,
    pub bev: BevGrid,
    pub bev_channels: usize,
    /// 2D convolutions between the BEV projection and the heads.
    pub bev_layers: usize,
    pub head_kernel: usize,
    /// Number of object classes `C` (at most 3: car, pedestrian, cyclist).
    pub num_classes: usize,
    /// Point coordinates are divided by this before entering the instance branch.
    pub coord_scale: f64,
    pub activation: Activation,
    /// Initial bias of the heatmap head; `-2.19` gives `sigmoid ~ 0.1`.
    pub heatmap_bias: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            motion_channels: vec![8, 16, 32],
            motion_levels: 2,
            motion_kernel: [3, 3, 3, 3],
            inst_channels: vec![16, 32, 64, 128],
            inst_strides: vec![2, 2, 2, 2],
            inst_kernel: [3, 3, 3, 1],
            fusion_channels: vec![16, 16, 32, 64, 128],
            bev: BevGrid::default(),
            bev_channels: 64,
            bev_layers: 2,
            head_kernel: 3,
            num_classes: 3,
            coord_scale: 25.6,
            activation: Activation::LeakyRelu,
            heatmap_bias: -2.19,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Small configuration that trains on synthetic scenes in seconds.
    pub fn toy() -> Self {
        Self {
            motion_channels: vec![8, 16, 16],
            motion_levels: 2,
            motion_kernel: [3, 3, 3, 3],
            inst_channels: vec![16, 16, 32, 32],
            inst_strides: vec![2, 2, 2, 2],
            inst_kernel: [3, 3, 3, 1],
            fusion_channels: vec![16, 16, 16, 32, 32],
            bev: BevGrid {
                x_range: [-16.0, 16.0],
                y_range: [-16.0, 16.0],
                z_range: [-1.6, 3.2],
                cell_size: 1.6,
                z_bins: 3,
            },
            bev_channels: 32,
            bev_layers: 2,
            head_kernel: 3,
            num_classes: 3,
            coord_scale: 16.0,
            activation: Activation::LeakyRelu,
            heatmap_bias: -2.19,
            seed: 7,
        }
    }

    pub fn stages(&self) -> usize {
        self.inst_channels.len()
    }

    /// Tensor stride of instance stage `k`.
    pub fn stage_stride(&self, k: usize) -> [i32; 4] {
        let s: usize = self.inst_strides[..=k].iter().product();
        [s as i32, s as i32, s as i32, 1]
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidConfig(m));
        if self.motion_levels == 0 || self.motion_channels.len() != self.motion_levels + 1 {
            return err(format!(
                "motion_channels needs motion_levels + 1 = {} entries, got {}",
                self.motion_levels + 1,
                self.motion_channels.len()
            ));
        }
        if self.inst_channels.is_empty() || self.inst_strides.len() != self.inst_channels.len() {
            return err("inst_strides and inst_channels must have one entry per stage".into());
        }
        if self.inst_strides.iter().any(|&s| s == 0) {
            return err("inst_strides must be >= 1".into());
        }
        if self.fusion_channels.len() != self.stages() + 1 {
            return err(format!(
                "fusion_channels needs {} entries (one per stage plus full resolution)",
                self.stages() + 1
            ));
        }
        if !(1..=3).contains(&self.num_classes) {
            return err(format!("num_classes must be 1..=3, got {}", self.num_classes));
        }
        if self.motion_kernel.iter().chain(&self.inst_kernel).any(|k| k % 2 == 0) {
            return Err(Error::Unsupported("kernel sizes must be odd".into()));
        }
        if self.head_kernel % 2 == 0 {
            return Err(Error::Unsupported("head_kernel must be odd".into()));
        }
        if self
            .motion_channels
            .iter()
            .chain(&self.inst_channels)
            .chain(&self.fusion_channels)
            .any(|&c| c == 0)
            || self.bev_channels == 0
        {
            return err("channel widths must be positive".into());
        }
        if !(self.coord_scale > 0.0) {
            return err("coord_scale must be positive".into());
        }
        self.bev.validate()
    }
}

/// Peak extraction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub top_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.3,
            top_k: 32,
        }
    }
}
