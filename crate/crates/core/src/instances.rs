//! Oriented 3D boxes shared by detection, losses, refinement and I/O.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl InstanceClass {
    pub const ALL: [InstanceClass; 3] = [InstanceClass::Car, InstanceClass::Pedestrian, InstanceClass::Cyclist];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            InstanceClass::Car => "car",
            InstanceClass::Pedestrian => "pedestrian",
            InstanceClass::Cyclist => "cyclist",
        }
    }
}

impl fmt::Display for InstanceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InstanceClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownClass {
                name: s.to_string(),
                allowed: Self::ALL.map(|c| c.name()).join(", "),
            })
    }
}

/// Decoded or annotated object: yaw-rotated box with a confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    pub class: InstanceClass,
    pub score: f64,
    /// Box center (x, y, z) in meters.
    pub center: [f64; 3],
    /// Extents along the box's own x, y, z axes.
    pub size: [f64; 3],
    /// Heading about +z in radians.
    pub yaw: f64,
}

impl InstancePrediction {
    pub fn new(class: InstanceClass, center: [f64; 3], size: [f64; 3], yaw: f64) -> Self {
        Self {
            class,
            score: 1.0,
            center,
            size,
            yaw,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidBox(format!("size must be positive, got {:?}", self.size)));
        }
        if self.center.iter().any(|c| !c.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::InvalidBox("non-finite center or yaw".into()));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidBox(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    /// Coordinates of `p` in the box frame (origin at the center, x along heading).
    pub fn to_box_frame(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    /// Inside or on the boundary.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_box_frame(p);
        (0..3).all(|k| l[k].abs() <= self.size[k] / 2.0)
    }

    /// The same physical box expressed in another frame.
    pub fn transformed(&self, pose: &Pose) -> Self {
        Self {
            center: pose.transform_point(self.center),
            yaw: wrap_angle(self.yaw + pose.yaw()),
            ..*self
        }
    }
}

/// Wraps to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}
