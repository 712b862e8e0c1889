//! Full forward pass and its gradient.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DecodeConfig, NetworkConfig, NUM_POINT_CLASSES};
use super::decode::decode_instances;
use super::fusion::{fusion_backward, fusion_traced};
use super::instance::{instance_backward, instance_traced, HeatmapSet, InstanceInput};
use super::motion::{motion_backward, motion_traced, occupancy};
use super::params::Params;
use super::pyramid::build_instance_pyramid;
use crate::error::{Error, Result};
use crate::geometry::{align_scan, attach_time, compose_poses, quantize, PointClass, Pose, QuantizationConfig, Scan};
use crate::instances::InstancePrediction;
use crate::losses::{gaussian_targets, total_loss, FocalParams, LossInputs, LossReport, Reduction};
use crate::real::Real;
use crate::sparse::Coord4;

/// Quantized network input for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    /// Unique voxels over all scans of the window.
    pub motion_coords: Vec<Coord4>,
    /// Voxel of each current-scan point (`t = 0`).
    pub point_coords: Vec<Coord4>,
    pub positions: Vec<[f64; 3]>,
    pub intensities: Vec<f64>,
    pub voxel_size: f64,
}

impl FrameInput {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Expresses past scans in the current frame. `scans[j]` was taken `j`
/// frames ago and `relative[j - 1]` is the pose of frame `j` in frame `j - 1`.
pub fn align_window(scans: &[Scan], relative: &[Pose]) -> Result<Vec<Scan>> {
    if scans.len() > relative.len() + 1 {
        return Err(Error::InvalidPose(format!(
            "{} scans need {} relative poses, got {}",
            scans.len(),
            scans.len() - 1,
            relative.len()
        )));
    }
    scans
        .iter()
        .enumerate()
        .map(|(j, s)| align_scan(s, &compose_poses(&relative[..j])?))
        .collect()
}

/// Quantizes an aligned window; `scans[0]` is the current scan. At most
/// `q.n_scans` scans are used.
pub fn prepare_frame(scans: &[Scan], q: &QuantizationConfig) -> Result<FrameInput> {
    q.validate()?;
    let current = scans
        .first()
        .ok_or_else(|| Error::InvalidConfig("at least the current scan is required".into()))?;
    let window = &scans[..scans.len().min(q.n_scans)];
    let points: Vec<_> = window
        .iter()
        .enumerate()
        .flat_map(|(j, s)| attach_time(s, j, q.delta_t))
        .collect();
    let vox = quantize(&points, q)?;
    let m = current.len();
    let point_coords = (0..m)
        .map(|i| {
            vox.point_coord(i)
                .ok_or_else(|| Error::InvalidConfig(format!("current point {i} is not finite")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameInput {
        motion_coords: vox.coords,
        point_coords,
        positions: current.points.iter().map(|p| p.position).collect(),
        intensities: current.points.iter().map(|p| p.intensity).collect(),
        voxel_size: q.delta_s,
    })
}

/// Per-point fusion output over (unlabeled, static, moving).
#[derive(Debug, Clone, PartialEq)]
pub struct PointLogits<T> {
    /// Row-major `M x 3`.
    pub logits: Vec<T>,
}

impl<T: Real> PointLogits<T> {
    pub fn len(&self) -> usize {
        self.logits.len() / NUM_POINT_CLASSES
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn softmax(&self) -> Vec<[f64; 3]> {
        self.logits.chunks_exact(3).map(|r| softmax3([r[0], r[1], r[2]].map(|v| v.as_f64()))).collect()
    }
}

fn softmax3(l: [f64; 3]) -> [f64; 3] {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = l.map(|v| (v - m).exp());
    let z: f64 = e.iter().sum();
    e.map(|v| v / z)
}

/// Hard labels with the softmax moving probability of each point.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MovingLabels {
    pub labels: Vec<PointClass>,
    pub moving_confidence: Vec<f64>,
}

impl MovingLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Labels without confidences (confidence 1 for moving, 0 otherwise).
    pub fn from_labels(labels: Vec<PointClass>) -> Self {
        let moving_confidence = labels
            .iter()
            .map(|l| if *l == PointClass::Moving { 1.0 } else { 0.0 })
            .collect();
        Self {
            labels,
            moving_confidence,
        }
    }
}

/// Argmax of the softmax; exact ties prefer static, then moving, then unlabeled.
pub fn predict_labels<T: Real>(logits: &PointLogits<T>) -> MovingLabels {
    let order = [PointClass::Static, PointClass::Moving, PointClass::Unlabeled];
    let mut out = MovingLabels::default();
    for p in logits.softmax() {
        let mut best = order[0];
        for c in &order[1..] {
            if p[c.index()] > p[best.index()] {
                best = *c;
            }
        }
        out.labels.push(best);
        out.moving_confidence.push(p[PointClass::Moving.index()]);
    }
    out
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub motion_ms: f64,
    pub instance_ms: f64,
    pub decode_ms: f64,
    pub fusion_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.motion_ms + self.instance_ms + self.decode_ms + self.fusion_ms
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub labels: MovingLabels,
    pub instances: Vec<InstancePrediction>,
    pub logits: PointLogits<T>,
    pub heatmaps: HeatmapSet<T>,
    /// MotionNet features per current point, `M x 3`.
    pub motion: Vec<T>,
    pub timings: StageTimings,
}

struct Traces<T> {
    motion: Option<super::motion::MotionTrace<T>>,
    instance: super::instance::InstanceTrace<T>,
    fusion: Option<super::fusion::FusionTrace<T>>,
    pyramid_lens: Vec<usize>,
    voxel_input_len: usize,
}

fn run<T: Real>(
    params: &Params<T>,
    cfg: &NetworkConfig,
    decode: &DecodeConfig,
    frame: &FrameInput,
    fixed_instances: Option<&[InstancePrediction]>,
) -> Result<(ForwardOutput<T>, Traces<T>)> {
    let t = Instant::now();
    let voxels = occupancy::<T>(&frame.motion_coords)?;
    let (motion, motion_trace) = motion_traced(&voxels, &params.motion, cfg, &frame.point_coords)?;
    let motion_ms = ms_since(t);

    let t = Instant::now();
    let input = InstanceInput {
        positions: &frame.positions,
        intensities: &frame.intensities,
        motion: &motion,
        coords: &frame.point_coords,
    };
    let (inst, inst_trace) = instance_traced(&input, &params.instance, cfg, frame.voxel_size)?;
    let instance_ms = ms_since(t);

    let t = Instant::now();
    let instances = match fixed_instances {
        Some(b) => b.to_vec(),
        None => decode_instances(&inst.heatmaps, decode, &cfg.bev),
    };
    let decode_ms = ms_since(t);

    let t = Instant::now();
    let inst_pyr = build_instance_pyramid(&instances, &inst.pyramid, frame.voxel_size, cfg.num_classes)?;
    let (logits, fusion_trace) = fusion_traced(
        &inst.voxel_input,
        &inst.pyramid,
        &inst_pyr,
        &params.fusion,
        cfg,
        &frame.point_coords,
    )?;
    let fusion_ms = ms_since(t);

    let logits = PointLogits { logits };
    let labels = predict_labels(&logits);
    let traces = Traces {
        motion: motion_trace,
        instance: inst_trace,
        fusion: fusion_trace,
        pyramid_lens: inst.pyramid.iter().map(|p| p.features().len()).collect(),
        voxel_input_len: inst.voxel_input.features().len(),
    };
    Ok((
        ForwardOutput {
            labels,
            instances,
            logits,
            heatmaps: inst.heatmaps,
            motion,
            timings: StageTimings {
                motion_ms,
                instance_ms,
                decode_ms,
                fusion_ms,
            },
        },
        traces,
    ))
}

/// Quantized frame in, labels, boxes, logits and heatmaps out.
pub fn pipeline_forward<T: Real>(
    params: &Params<T>,
    cfg: &NetworkConfig,
    decode: &DecodeConfig,
    frame: &FrameInput,
) -> Result<ForwardOutput<T>> {
    Ok(run(params, cfg, decode, frame, None)?.0)
}

/// Ground truth of one training frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameTargets<'a> {
    pub labels: &'a [PointClass],
    pub boxes: &'a [InstancePrediction],
}

/// Loss settings used during training.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal: FocalParams,
    pub reduction: Reduction,
}

/// Total loss of one frame without the backward pass.
pub fn frame_loss<T: Real>(
    params: &Params<T>,
    cfg: &NetworkConfig,
    decode: &DecodeConfig,
    loss: &LossConfig,
    frame: &FrameInput,
    targets: &FrameTargets<'_>,
    fixed_instances: Option<&[InstancePrediction]>,
) -> Result<LossReport> {
    let out = run(params, cfg, decode, frame, fixed_instances)?.0;
    Ok(evaluate_loss(cfg, loss, &out, targets)?.0)
}

fn evaluate_loss<T: Real>(
    cfg: &NetworkConfig,
    loss: &LossConfig,
    out: &ForwardOutput<T>,
    targets: &FrameTargets<'_>,
) -> Result<(LossReport, crate::losses::TotalGrads<T>)> {
    if targets.labels.len() != out.labels.len() {
        return Err(Error::LengthMismatch {
            expected: out.labels.len(),
            found: targets.labels.len(),
        });
    }
    let g = gaussian_targets(targets.boxes, &cfg.bev, cfg.num_classes);
    let inputs = LossInputs {
        motion_logits: &out.motion,
        fusion_logits: &out.logits.logits,
        gt_labels: targets.labels,
        heatmap: &out.heatmaps.heatmap,
        targets: &g,
        regression: &out.heatmaps.regression,
        gt_boxes: targets.boxes,
        grid: &cfg.bev,
    };
    total_loss(&inputs, &loss.focal, loss.reduction)
}

/// Total loss and its gradient w.r.t. every parameter. Instances feeding the
/// fusion decoder are decoded from the current heatmaps unless
/// `fixed_instances` is given; either way they are constants for the
/// gradient.
pub fn forward_backward<T: Real>(
    params: &Params<T>,
    cfg: &NetworkConfig,
    decode: &DecodeConfig,
    loss: &LossConfig,
    frame: &FrameInput,
    targets: &FrameTargets<'_>,
    fixed_instances: Option<&[InstancePrediction]>,
) -> Result<(LossReport, Params<T>, ForwardOutput<T>)> {
    let (out, traces) = run(params, cfg, decode, frame, fixed_instances)?;
    let (report, lg) = evaluate_loss(cfg, loss, &out, targets)?;

    let mut grads = params.zeros_like();
    let (g_pyr, g_vox) = match &traces.fusion {
        Some(ft) => {
            let fg = fusion_backward(ft, &params.fusion, &lg.fusion_logits, &mut grads.fusion);
            (fg.pyramid, fg.voxel_input)
        }
        None => (
            traces.pyramid_lens.iter().map(|n| vec![T::zero(); *n]).collect(),
            vec![T::zero(); traces.voxel_input_len],
        ),
    };
    let mut g_motion = instance_backward(
        &traces.instance,
        &params.instance,
        cfg,
        &lg.heatmap,
        &lg.regression,
        g_pyr,
        g_vox,
        &mut grads.instance,
    );
    super::layers::add_into(&mut g_motion, &lg.motion_logits);
    if let Some(mt) = &traces.motion {
        motion_backward(mt, &params.motion, &g_motion, &mut grads.motion);
    }
    Ok((report, grads, out))
}


#[cfg(test)]
mod gradient_tests {
    use super::*;
    use crate::geometry::LidarPoint;
    use crate::instances::InstanceClass;
    use crate::network::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(rng: &mut ChaCha8Rng, n_scans: usize, m: usize) -> (Vec<Scan>, Vec<PointClass>, Vec<InstancePrediction>) {
        let car = InstancePrediction::new(InstanceClass::Car, [3.0, 2.0, 0.75], [4.0, 1.8, 1.5], 0.3);
        let scans = (0..n_scans)
            .map(|j| {
                let pts = (0..m)
                    .map(|_| {
                        let shift = -0.5 * j as f64;
                        LidarPoint::new(
                            rng.gen_range(-6.0..6.0) + shift,
                            rng.gen_range(-6.0..6.0),
                            rng.gen_range(-1.0..2.0),
                            rng.gen_range(0.0..1.0),
                        )
                    })
                    .collect();
                Scan::new(pts, None).unwrap()
            })
            .collect::<Vec<_>>();
        let labels = scans[0]
            .points
            .iter()
            .map(|p| {
                if car.contains(p.position) {
                    PointClass::Moving
                } else if p.position[2] > 1.8 {
                    PointClass::Unlabeled
                } else {
                    PointClass::Static
                }
            })
            .collect();
        (scans, labels, vec![car])
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = NetworkConfig::toy();
        let q = QuantizationConfig {
            delta_s: 0.4,
            delta_t: 0.1,
            n_scans: 2,
        };
        let (scans, labels, boxes) = scene(&mut rng, 2, 40);
        let frame = prepare_frame(&scans, &q).unwrap();
        let mut params: Params<f64> = init_params(&cfg);
        // Empty BEV cells would otherwise sit exactly on the activation kink.
        for p in &mut params.instance.bev {
            p.bias.iter_mut().for_each(|b| *b = rng.gen_range(0.05..0.2));
        }
        let loss = LossConfig::default();
        let targets = FrameTargets {
            labels: &labels,
            boxes: &boxes,
        };
        let decode = DecodeConfig::default();
        let eval = |p: &Params<f64>| frame_loss(p, &cfg, &decode, &loss, &frame, &targets, Some(&boxes)).unwrap().l_total;
        let (_, grads, _) = forward_backward(&params, &cfg, &decode, &loss, &frame, &targets, Some(&boxes)).unwrap();
        let flat = params.to_flat();
        let g = grads.to_flat();
        let mut picks = Vec::new();
        let mut pos = 0;
        params.visit(&mut |_, _, v| {
            picks.push(pos + v.len() - 1);
            pos += v.len();
        });
        picks.extend((0..40).map(|_| rng.gen_range(0..flat.len())));
        let h = 1e-5;
        for k in picks {
            let mut p = params.clone();
            let mut v = flat.clone();
            v[k] += h;
            p.load_flat(&v);
            let fp = eval(&p);
            v[k] -= 2.0 * h;
            p.load_flat(&v);
            let fm = eval(&p);
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-5);
            assert!(err < 1e-3, "parameter {k}: fd {fd:e} analytic {:e}", g[k]);
        }
    }
}
