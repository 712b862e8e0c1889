//! Pose composition, scan alignment, time tagging and 4D voxel quantization.

use std::collections::HashMap;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::Coord4;

const RIGID_TOLERANCE: f64 = 1e-6;
/// Added before flooring so that values like `-0.3 / 0.1` bin deterministically.
pub const FLOOR_GUARD: f64 = 1e-9;

/// Rigid-body transform stored as a homogeneous 4x4 matrix (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    matrix: Matrix4<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    /// Validates that the rotation block is orthonormal with unit determinant
    /// and the last row is `[0, 0, 0, 1]`.
    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entry".into()));
        }
        let last = matrix.row(3);
        if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > RIGID_TOLERANCE {
            return Err(Error::InvalidPose(format!(
                "last row must be [0, 0, 0, 1], got {last}"
            )));
        }
        let rotation: Matrix3<f64> = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.amax() > RIGID_TOLERANCE {
            return Err(Error::InvalidPose("rotation block is not orthonormal".into()));
        }
        if (rotation.determinant() - 1.0).abs() > RIGID_TOLERANCE {
            return Err(Error::InvalidPose("rotation determinant is not 1".into()));
        }
        Ok(Self { matrix })
    }

    /// Builds a pose from a row-major 3x4 `[R | t]` block.
    pub fn from_3x4(rows: &[f64; 12]) -> Result<Self> {
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = rows[r * 4 + c];
            }
        }
        Self::from_matrix(m)
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        let mut matrix = Matrix4::identity();
        matrix[(0, 3)] = x;
        matrix[(1, 3)] = y;
        matrix[(2, 3)] = z;
        Self { matrix }
    }

    /// Rotation about the z axis by `angle` radians.
    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let mut matrix = Matrix4::identity();
        matrix[(0, 0)] = c;
        matrix[(0, 1)] = -s;
        matrix[(1, 0)] = s;
        matrix[(1, 1)] = c;
        Self { matrix }
    }

    /// Rotation about z followed by a translation.
    pub fn from_yaw_translation(yaw: f64, t: [f64; 3]) -> Self {
        let mut p = Self::rot_z(yaw);
        p.matrix[(0, 3)] = t[0];
        p.matrix[(1, 3)] = t[1];
        p.matrix[(2, 3)] = t[2];
        p
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    /// Row-major `[R | t]`.
    pub fn to_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            matrix: self.matrix * other.matrix,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation_vector());
        let mut matrix = Matrix4::identity();
        matrix.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        matrix.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Pose { matrix }
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.matrix * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }

    /// Heading of the rotated x axis in the xy plane.
    pub fn yaw(&self) -> f64 {
        self.matrix[(1, 0)].atan2(self.matrix[(0, 0)])
    }

    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.matrix - other.matrix).amax()
    }
}

/// Composes consecutive relative transforms `T_1^0, T_2^1, ..., T_j^{j-1}` into
/// `T_j^0`, the transform from scan `j` into the current scan.
pub fn compose_poses(relatives: &[Pose]) -> Result<Pose> {
    relatives.iter().try_fold(Pose::identity(), |acc, p| {
        let checked = Pose::from_matrix(p.matrix)?;
        Ok(acc.compose(&checked))
    })
}

/// Per-point class used both for ground truth and predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum PointClass {
    Unlabeled = 0,
    Static = 1,
    Moving = 2,
}

impl PointClass {
    pub const ALL: [PointClass; 3] = [PointClass::Unlabeled, PointClass::Static, PointClass::Moving];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub position: [f64; 3],
    pub intensity: f64,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self {
            position: [x, y, z],
            intensity,
        }
    }
}

/// One LiDAR sweep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scan {
    pub points: Vec<LidarPoint>,
    pub labels: Option<Vec<PointClass>>,
    /// 0 for the current scan, `j` for the scan `j` sweeps in the past.
    pub index: usize,
}

impl Scan {
    pub fn new(points: Vec<LidarPoint>, labels: Option<Vec<PointClass>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::LengthMismatch {
                    expected: points.len(),
                    found: l.len(),
                });
            }
        }
        if let Some(i) = points
            .iter()
            .position(|p| p.position.iter().any(|v| !v.is_finite()) || !p.intensity.is_finite())
        {
            return Err(Error::InvalidConfig(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            labels,
            index: 0,
        })
    }

    pub fn with_index(mut self, index: usize) -> Self {
        self.index = index;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Maps every point of `scan` through `pose`; intensities and labels are kept.
pub fn align_scan(scan: &Scan, pose: &Pose) -> Result<Scan> {
    let pose = Pose::from_matrix(pose.matrix)?;
    let points = scan
        .points
        .iter()
        .map(|p| LidarPoint {
            position: pose.transform_point(p.position),
            intensity: p.intensity,
        })
        .collect();
    Ok(Scan {
        points,
        labels: scan.labels.clone(),
        index: scan.index,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPoint {
    pub position: [f64; 3],
    /// Seconds relative to the current scan (non-positive).
    pub t: f64,
}

/// Tags every point of scan `j` with `t = -j * delta_t`.
pub fn attach_time(scan: &Scan, j: usize, delta_t: f64) -> Vec<TimedPoint> {
    let t = -(j as f64) * delta_t;
    scan.points
        .iter()
        .map(|p| TimedPoint {
            position: p.position,
            t,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizationConfig {
    /// Isotropic spatial voxel size in meters.
    pub delta_s: f64,
    /// Temporal resolution in seconds.
    pub delta_t: f64,
    /// Number of input scans including the current one.
    pub n_scans: usize,
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        Self {
            delta_s: 0.1,
            delta_t: 0.1,
            n_scans: 10,
        }
    }
}

impl QuantizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_s > 0.0 && self.delta_s.is_finite()) {
            return Err(Error::InvalidConfig(format!("delta_s must be > 0, got {}", self.delta_s)));
        }
        if !(self.delta_t > 0.0 && self.delta_t.is_finite()) {
            return Err(Error::InvalidConfig(format!("delta_t must be > 0, got {}", self.delta_t)));
        }
        if self.n_scans == 0 {
            return Err(Error::InvalidConfig("n_scans must be >= 1".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn floor_index(v: f64, delta: f64) -> i32 {
    (v / delta + FLOOR_GUARD).floor() as i32
}

/// Output of [`quantize`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Voxelization {
    /// Unique voxel coordinates in first-occurrence order.
    pub coords: Vec<Coord4>,
    /// Voxel row of each input point; `None` for rejected points.
    pub point_to_voxel: Vec<Option<usize>>,
    /// Indices of points with non-finite coordinates.
    pub rejected: Vec<usize>,
}

impl Voxelization {
    /// Voxel coordinate of each accepted point.
    pub fn point_coord(&self, i: usize) -> Option<Coord4> {
        self.point_to_voxel[i].map(|v| self.coords[v])
    }
}

/// Bins timed points into 4D voxels `floor(v / delta)` with `delta_s` on the
/// spatial axes and `delta_t` on time.
pub fn quantize(points: &[TimedPoint], cfg: &QuantizationConfig) -> Result<Voxelization> {
    cfg.validate()?;
    let mut index: HashMap<Coord4, usize> = HashMap::with_capacity(points.len());
    let mut out = Voxelization {
        coords: Vec::new(),
        point_to_voxel: Vec::with_capacity(points.len()),
        rejected: Vec::new(),
    };
    for (i, p) in points.iter().enumerate() {
        if p.position.iter().any(|v| !v.is_finite()) || !p.t.is_finite() {
            out.rejected.push(i);
            out.point_to_voxel.push(None);
            continue;
        }
        let c = Coord4::new(
            floor_index(p.position[0], cfg.delta_s),
            floor_index(p.position[1], cfg.delta_s),
            floor_index(p.position[2], cfg.delta_s),
            floor_index(p.t, cfg.delta_t),
        );
        let row = *index.entry(c).or_insert_with(|| {
            out.coords.push(c);
            out.coords.len() - 1
        });
        out.point_to_voxel.push(Some(row));
    }
    Ok(out)
}
