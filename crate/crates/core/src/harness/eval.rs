use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{confusion, iou, ConfusionCounts};
use super::synth::SyntheticScene;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::geometry::PointClass;
use crate::network::{align_window, pipeline_forward, prepare_frame, Params};
use crate::refinement::{refine, RefinementState};

/// Wall-clock milliseconds per stage of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameTimings {
    pub quantize_ms: f64,
    pub motion_ms: f64,
    pub instance_ms: f64,
    pub decode_ms: f64,
    pub fusion_ms: f64,
    pub refine_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    /// Counts of the network labels before refinement.
    pub raw: ConfusionCounts,
    #[serde(flatten)]
    pub refined: ConfusionCounts,
    pub instances: usize,
    pub timings: FrameTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub frames: Vec<FrameRecord>,
    pub raw_total: ConfusionCounts,
    pub total: ConfusionCounts,
    pub raw_iou: f64,
    /// IoU after refinement, counts summed over frames first.
    pub iou: f64,
}

impl SequenceReport {
    pub fn from_frames(frames: Vec<FrameRecord>) -> Self {
        let raw_total = frames.iter().fold(ConfusionCounts::default(), |a, f| a + f.raw);
        let total = frames.iter().fold(ConfusionCounts::default(), |a, f| a + f.refined);
        Self {
            raw_iou: iou(&raw_total),
            iou: iou(&total),
            frames,
            raw_total,
            total,
        }
    }

    /// Merges several sequences into one report.
    pub fn merge(reports: &[SequenceReport]) -> Self {
        Self::from_frames(reports.iter().flat_map(|r| r.frames.iter().copied()).collect())
    }
}

/// Aggregated IoU of label pairs given frame by frame.
pub fn evaluate_labels(frames: &[(&[PointClass], &[PointClass])]) -> Result<(f64, Vec<ConfusionCounts>)> {
    let counts = frames
        .iter()
        .map(|(p, g)| confusion(p, g))
        .collect::<Result<Vec<_>>>()?;
    let total = counts.iter().fold(ConfusionCounts::default(), |a, c| a + *c);
    Ok((iou(&total), counts))
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs the network and refinement over every frame of a scene.
pub fn evaluate_sequence(params: &Params<f32>, cfg: &ModelConfig, scene: &SyntheticScene) -> Result<SequenceReport> {
    let mut state = RefinementState::new();
    let mut frames = Vec::with_capacity(scene.len());
    for f in 0..scene.len() {
        let t = Instant::now();
        let (scans, poses) = scene.window(f, cfg.quantization.n_scans);
        let aligned = align_window(&scans, &poses)?;
        let input = prepare_frame(&aligned, &cfg.quantization)?;
        let quantize_ms = ms(t);

        let out = pipeline_forward(params, &cfg.network, &cfg.decode, &input)?;

        let t = Instant::now();
        let pose = (f > 0).then(|| scene.pose_to_previous(f));
        let refined = refine(
            &out.labels,
            &out.instances,
            &scene.scans[f],
            pose.as_ref(),
            &mut state,
            &cfg.refinement,
        )?;
        let refine_ms = ms(t);

        let gt = scene.labels(f);
        frames.push(FrameRecord {
            frame: f,
            raw: confusion(&out.labels.labels, gt)?,
            refined: confusion(&refined.labels, gt)?,
            instances: out.instances.len(),
            timings: FrameTimings {
                quantize_ms,
                motion_ms: out.timings.motion_ms,
                instance_ms: out.timings.instance_ms,
                decode_ms: out.timings.decode_ms,
                fusion_ms: out.timings.fusion_ms,
                refine_ms,
            },
        });
    }
    Ok(SequenceReport::from_frames(frames))
}
