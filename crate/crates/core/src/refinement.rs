//! Instance-based refinement of point-wise moving labels.
//!
//! Three rules promote the points of a detected instance to moving: a
//! per-instance vote, a high-dynamic-scene rule for cars, and temporal
//! persistence of the instance over the last few frames.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointClass, Pose, Scan};
use crate::instances::{InstanceClass, InstancePrediction};
use crate::network::MovingLabels;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementConfig {
    /// Moving-point fraction above which an instance is moving.
    pub alpha0: f64,
    /// Moving-point fraction above which a car counts as a moving vehicle.
    pub alpha1: f64,
    /// Confidence above which a car point counts toward the dynamic flag.
    pub beta0: f64,
    /// Moving vehicles needed (strictly more) for a high-dynamic scene.
    pub beta1: usize,
    /// Past frames consulted.
    pub theta0: usize,
    /// Past moving matches needed (strictly more).
    pub theta1: usize,
    /// Largest center distance in meters for two boxes to match.
    pub match_radius: f64,
    /// Largest per-axis `max / min` size ratio for two boxes to match.
    pub size_ratio_max: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            alpha0: 0.6,
            alpha1: 0.3,
            beta0: 1e-5,
            beta1: 5,
            theta0: 5,
            theta1: 3,
            match_radius: 1.0,
            size_ratio_max: 1.5,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.alpha0) || !unit(self.alpha1) {
            return Err(Error::InvalidConfig(format!(
                "alpha0 and alpha1 must lie in (0, 1], got {} and {}",
                self.alpha0, self.alpha1
            )));
        }
        if !(0.0..=1.0).contains(&self.beta0) {
            return Err(Error::InvalidConfig(format!("beta0 must lie in [0, 1], got {}", self.beta0)));
        }
        if !(self.match_radius >= 0.0) || !(self.size_ratio_max >= 1.0) {
            return Err(Error::InvalidConfig(
                "match_radius must be >= 0 and size_ratio_max >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One refined frame as remembered by later frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameHistoryEntry {
    pub instances: Vec<InstancePrediction>,
    pub moving_flags: Vec<bool>,
    /// Pose of the frame before this one, expressed in this frame.
    pub pose_to_previous: Option<Pose>,
}

/// Most recent frame first, at most `theta0` entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefinementState {
    pub history: VecDeque<FrameHistoryEntry>,
    /// Past frames skipped so far because a pose was missing.
    pub missing_pose_warnings: usize,
}

impl RefinementState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn push(&mut self, entry: FrameHistoryEntry, capacity: usize) {
        self.history.push_front(entry);
        self.history.truncate(capacity);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementOutput {
    pub labels: Vec<PointClass>,
    /// Final moving flag of every current instance.
    pub moving_flags: Vec<bool>,
    /// Past matches with a moving instance, per current instance.
    pub persistence: Vec<usize>,
    /// Past frames skipped in this call because a pose was missing.
    pub skipped_frames: usize,
}

/// Indices of the points inside `b`, boundary included.
pub fn points_in_box(scan: &Scan, b: &InstancePrediction) -> Vec<usize> {
    let (s, c) = b.yaw.sin_cos();
    let hx = 0.5 * (b.size[0] * c.abs() + b.size[1] * s.abs()) + 1e-9;
    let hy = 0.5 * (b.size[0] * s.abs() + b.size[1] * c.abs()) + 1e-9;
    let hz = 0.5 * b.size[2] + 1e-9;
    scan.points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let [x, y, z] = p.position;
            (x - b.center[0]).abs() <= hx
                && (y - b.center[1]).abs() <= hy
                && (z - b.center[2]).abs() <= hz
                && b.contains(p.position)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Greedy one-to-one matching of current boxes (centers already in the past
/// frame) to past boxes by increasing center distance. Pairs must be within
/// `match_radius` and have every per-axis size ratio within `size_ratio_max`.
pub fn match_boxes(
    current_centers: &[[f64; 3]],
    current: &[InstancePrediction],
    past: &[InstancePrediction],
    cfg: &RefinementConfig,
) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (i, (c, b)) in current_centers.iter().zip(current).enumerate() {
        for (k, p) in past.iter().enumerate() {
            let d = ((c[0] - p.center[0]).powi(2) + (c[1] - p.center[1]).powi(2) + (c[2] - p.center[2]).powi(2)).sqrt();
            let sizes_ok = (0..3).all(|a| {
                let (lo, hi) = (b.size[a].min(p.size[a]), b.size[a].max(p.size[a]));
                lo > 0.0 && hi / lo <= cfg.size_ratio_max
            });
            if d <= cfg.match_radius && sizes_ok {
                pairs.push((d, i, k));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; current.len()];
    let mut taken = vec![false; past.len()];
    for (_, i, k) in pairs {
        if out[i].is_none() && !taken[k] {
            out[i] = Some(k);
            taken[k] = true;
        }
    }
    out
}

fn fraction(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

/// Refines the labels of the current frame and pushes it onto `state`.
/// `pose_to_previous` is the previous frame's pose in the current frame;
/// `None` makes every buffered frame unreachable for the persistence rule.
pub fn refine(
    predicted: &MovingLabels,
    instances: &[InstancePrediction],
    scan: &Scan,
    pose_to_previous: Option<&Pose>,
    state: &mut RefinementState,
    cfg: &RefinementConfig,
) -> Result<RefinementOutput> {
    cfg.validate()?;
    let n = scan.len();
    if predicted.labels.len() != n || predicted.moving_confidence.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: predicted.labels.len().min(predicted.moving_confidence.len()),
        });
    }
    for b in instances {
        b.validate()?;
    }
    let idx: Vec<Vec<usize>> = instances.par_iter().map(|b| points_in_box(scan, b)).collect();

    let mut flags = vec![false; instances.len()];
    let mut dynamic = vec![false; instances.len()];
    let mut moving_cars = 0usize;
    for (i, b) in instances.iter().enumerate() {
        let pts = &idx[i];
        let moving = pts.iter().filter(|&&p| predicted.labels[p] == PointClass::Moving).count();
        let frac = fraction(moving, pts.len());
        if frac > cfg.alpha0 {
            flags[i] = true;
        }
        if b.class == InstanceClass::Car {
            if frac > cfg.alpha1 {
                moving_cars += 1;
            }
            let confident = pts.iter().filter(|&&p| predicted.moving_confidence[p] > cfg.beta0).count();
            if fraction(confident, pts.len()) > 0.5 {
                dynamic[i] = true;
            }
        }
    }
    if moving_cars > cfg.beta1 {
        for (f, d) in flags.iter_mut().zip(&dynamic) {
            *f |= *d;
        }
    }

    let mut persistence = vec![0usize; instances.len()];
    let mut skipped = 0;
    let mut to_past: Option<Pose> = pose_to_previous.copied();
    let depth = state.history.len().min(cfg.theta0);
    for (j, entry) in state.history.iter().take(depth).enumerate() {
        if j > 0 {
            let link = state.history[j - 1].pose_to_previous;
            to_past = match (to_past, link) {
                (Some(a), Some(b)) => Some(a.compose(&b)),
                _ => None,
            };
        }
        let Some(past_in_current) = to_past else {
            skipped += 1;
            continue;
        };
        let current_to_past = past_in_current.inverse();
        let centers: Vec<[f64; 3]> = instances.iter().map(|b| current_to_past.transform_point(b.center)).collect();
        let matches = match_boxes(&centers, instances, &entry.instances, cfg);
        for (i, m) in matches.iter().enumerate() {
            if let Some(k) = m {
                if entry.moving_flags.get(*k).copied().unwrap_or(false) {
                    persistence[i] += 1;
                }
            }
        }
    }
    for (f, q) in flags.iter_mut().zip(&persistence) {
        if *q > cfg.theta1 {
            *f = true;
        }
    }

    let mut labels = predicted.labels.clone();
    for (i, pts) in idx.iter().enumerate() {
        if flags[i] {
            for &p in pts {
                labels[p] = PointClass::Moving;
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} past frame(s) skipped by the persistence rule: pose missing");
    }
    state.missing_pose_warnings += skipped;
    state.push(
        FrameHistoryEntry {
            instances: instances.to_vec(),
            moving_flags: flags.clone(),
            pose_to_previous: pose_to_previous.copied(),
        },
        cfg.theta0,
    );
    Ok(RefinementOutput {
        labels,
        moving_flags: flags,
        persistence,
        skipped_frames: skipped,
    })
}
