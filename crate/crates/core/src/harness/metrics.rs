use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointClass;

/// Moving-class confusion counts over points with a ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub evaluated_points: u64,
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            evaluated_points: self.evaluated_points + o.evaluated_points,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Points whose ground truth is unlabeled are skipped. A prediction of
/// unlabeled on a moving point is a false negative.
pub fn confusion(pred: &[PointClass], gt: &[PointClass]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: gt.len(),
            found: pred.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (p, g) in pred.iter().zip(gt) {
        if *g == PointClass::Unlabeled {
            continue;
        }
        c.evaluated_points += 1;
        match (*p == PointClass::Moving, *g == PointClass::Moving) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// `TP / (TP + FP + FN)`, or 1 when there is nothing to find and nothing
/// was falsely found.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let d = c.tp + c.fp + c.fn_;
    if d == 0 {
        1.0
    } else {
        c.tp as f64 / d as f64
    }
}
