//! Adam training on synthetic frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::SyntheticScene;
use crate::config::{ModelConfig, TrainingConfig};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::network::{align_window, forward_backward, frame_loss, prepare_frame, FrameInput, FrameTargets, Params};
use crate::geometry::PointClass;
use crate::instances::InstancePrediction;

/// Preprocessed training sample.
#[derive(Debug, Clone)]
pub struct TrainingFrame {
    pub input: FrameInput,
    pub labels: Vec<PointClass>,
    pub boxes: Vec<InstancePrediction>,
}

impl TrainingFrame {
    pub fn targets(&self) -> FrameTargets<'_> {
        FrameTargets {
            labels: &self.labels,
            boxes: &self.boxes,
        }
    }
}

/// Aligns and quantizes frame `f` of a scene.
pub fn training_frame(scene: &SyntheticScene, f: usize, cfg: &ModelConfig) -> Result<TrainingFrame> {
    let (scans, poses) = scene.window(f, cfg.quantization.n_scans);
    let aligned = align_window(&scans, &poses)?;
    Ok(TrainingFrame {
        input: prepare_frame(&aligned, &cfg.quantization)?,
        labels: scene.labels(f).to_vec(),
        boxes: scene.boxes(f),
    })
}

/// Every frame of every scene that has a full window of `n_scans` scans.
pub fn training_frames(scenes: &[SyntheticScene], cfg: &ModelConfig) -> Result<Vec<TrainingFrame>> {
    let first = cfg.quantization.n_scans - 1;
    let mut out = Vec::new();
    for s in scenes {
        for f in first..s.len() {
            out.push(training_frame(s, f, cfg)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub frame: usize,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: TrainingConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: TrainingConfig, n: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = self.cfg.learning_rate;
        for k in 0..params.len() {
            let g = grads[k] as f64;
            let m = b1 * self.m[k] as f64 + (1.0 - b1) * g;
            let v = b2 * self.v[k] as f64 + (1.0 - b2) * g * g;
            self.m[k] = m as f32;
            self.v[k] = v as f32;
            let update = lr * (m / c1) / ((v / c2).sqrt() + self.cfg.epsilon);
            params[k] -= update as f32;
        }
    }
}

/// Runs `cfg.training.steps` Adam steps, sampling frames uniformly with the
/// training seed. Returns the loss of every step, evaluated before its
/// update.
pub fn train_toy(
    params: &mut Params<f32>,
    cfg: &ModelConfig,
    frames: &[TrainingFrame],
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if frames.is_empty() && cfg.training.steps > 0 {
        return Err(Error::InvalidConfig("no training frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    let mut flat = params.to_flat();
    let mut adam = Adam::new(cfg.training, flat.len());
    let mut curve = Vec::with_capacity(cfg.training.steps);
    for step in 0..cfg.training.steps {
        let f = rng.gen_range(0..frames.len());
        let frame = &frames[f];
        let (loss, grads, _) = forward_backward(
            params,
            &cfg.network,
            &cfg.decode,
            &cfg.loss,
            &frame.input,
            &frame.targets(),
            None,
        )?;
        let g = grads.to_flat();
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                step,
                detail: format!(
                    "frame {f}: losses {loss:?}, {} non-finite gradient entries",
                    g.iter().filter(|v| !v.is_finite()).count()
                ),
            });
        }
        let record = StepRecord { step, frame: f, loss };
        on_step(&record);
        curve.push(record);
        adam.step(&mut flat, &g);
        params.load_flat(&flat);
    }
    Ok(curve)
}

/// At most `k` frames spread evenly over `frames`, for loss tracking.
pub fn probe_frames(frames: &[TrainingFrame], k: usize) -> Vec<TrainingFrame> {
    if frames.is_empty() || k == 0 {
        return Vec::new();
    }
    let step = frames.len().div_ceil(k);
    frames.iter().step_by(step).cloned().collect()
}

/// Mean loss over `frames` with the current parameters.
pub fn mean_loss(params: &Params<f32>, cfg: &ModelConfig, frames: &[TrainingFrame]) -> Result<LossReport> {
    let mut acc = [0.0f64; 4];
    for fr in frames {
        let r = frame_loss(params, &cfg.network, &cfg.decode, &cfg.loss, &fr.input, &fr.targets(), None)?;
        for (a, v) in acc.iter_mut().zip([r.l_motion, r.l_cls, r.l_reg, r.l_mos]) {
            *a += v;
        }
    }
    let n = frames.len().max(1) as f64;
    Ok(LossReport::from_components(acc[0] / n, acc[1] / n, acc[2] / n, acc[3] / n))
}
