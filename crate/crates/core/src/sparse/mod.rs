//! Sparse 4D tensors and the operations the networks are built from.
//!
//! Coordinates are stored in absolute voxel units. A tensor with stride `s`
//! only holds coordinates divisible by `s` on each axis, and its voxels cover
//! `s` base voxels per axis.

mod bev;
mod conv;
mod devox;
mod kernel;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub use bev::{to_bev, to_bev_backward, BevGrid, BevMap};
pub use conv::{
    sparse_conv, sparse_conv_backward, sparse_conv_traced, sparse_deconv, sparse_deconv_backward,
    sparse_deconv_traced, ConvGrads, ConvTape,
};
pub use devox::{features_to_points, points_to_features_backward, PointGather};
pub use kernel::{kernel_map, kernel_offsets, ConvParams, KernelMap, KernelPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Coord4 {
    pub x: i32,
    pub y: i32,
    pub z: i32,
    pub t: i32,
}

impl Coord4 {
    pub const fn new(x: i32, y: i32, z: i32, t: i32) -> Self {
        Self { x, y, z, t }
    }

    pub fn from_array(a: [i32; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [i32; 4] {
        [self.x, self.y, self.z, self.t]
    }

    /// Floors every axis onto the lattice of `stride`.
    pub fn floor_to(self, stride: [i32; 4]) -> Self {
        let a = self.to_array();
        Self::from_array(std::array::from_fn(|k| a[k].div_euclid(stride[k]) * stride[k]))
    }

    pub fn offset(self, delta: [i32; 4]) -> Self {
        let a = self.to_array();
        Self::from_array(std::array::from_fn(|k| a[k] + delta[k]))
    }

    pub fn chebyshev(self, other: Self) -> i32 {
        let (a, b) = (self.to_array(), other.to_array());
        (0..4).map(|k| (a[k] - b[k]).abs()).max().unwrap_or(0)
    }

    pub fn is_aligned(self, stride: [i32; 4]) -> bool {
        self.to_array()
            .iter()
            .zip(stride)
            .all(|(c, s)| c.rem_euclid(s) == 0)
    }
}

/// How duplicate coordinates are merged by [`SparseTensor4::build`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduce {
    #[default]
    Mean,
    First,
}

/// Unique 4D coordinates with one feature row of fixed width each.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor4<T> {
    coords: Vec<Coord4>,
    features: Vec<T>,
    width: usize,
    index: HashMap<Coord4, usize>,
    stride: [i32; 4],
}

impl<T: Real> SparseTensor4<T> {
    /// Empty tensor of the given width and stride.
    pub fn empty(width: usize, stride: [i32; 4]) -> Self {
        Self {
            coords: Vec::new(),
            features: Vec::new(),
            width,
            index: HashMap::new(),
            stride,
        }
    }

    /// Builds a tensor from unique coordinates and row-major features.
    pub fn from_parts(coords: Vec<Coord4>, features: Vec<T>, width: usize, stride: [i32; 4]) -> Result<Self> {
        if stride.iter().any(|&s| s < 1) {
            return Err(Error::StrideMismatch(format!("stride must be positive, got {stride:?}")));
        }
        if features.len() != coords.len() * width {
            return Err(Error::LengthMismatch {
                expected: coords.len() * width,
                found: features.len(),
            });
        }
        let mut index = HashMap::with_capacity(coords.len());
        for (row, &c) in coords.iter().enumerate() {
            if !c.is_aligned(stride) {
                return Err(Error::MisalignedCoordinate { coord: c, stride });
            }
            if index.insert(c, row).is_some() {
                return Err(Error::DuplicateCoordinate(c));
            }
        }
        Ok(Self {
            coords,
            features,
            width,
            index,
            stride,
        })
    }

    /// Builds a stride-1 tensor, merging duplicate coordinates with `reduce`.
    pub fn build(coords: &[Coord4], rows: &[Vec<T>], reduce: Reduce) -> Result<Self> {
        if coords.len() != rows.len() {
            return Err(Error::LengthMismatch {
                expected: coords.len(),
                found: rows.len(),
            });
        }
        let width = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != width) {
            return Err(Error::WidthMismatch {
                expected: width,
                found: bad.len(),
            });
        }
        let mut index: HashMap<Coord4, usize> = HashMap::with_capacity(coords.len());
        let mut uniq = Vec::new();
        let mut features: Vec<T> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for (&c, row) in coords.iter().zip(rows) {
            match index.get(&c) {
                Some(&r) => {
                    if reduce == Reduce::Mean {
                        for (acc, &v) in features[r * width..(r + 1) * width].iter_mut().zip(row) {
                            *acc += v;
                        }
                        counts[r] += 1;
                    }
                }
                None => {
                    index.insert(c, uniq.len());
                    uniq.push(c);
                    features.extend_from_slice(row);
                    counts.push(1);
                }
            }
        }
        if reduce == Reduce::Mean {
            for (r, &n) in counts.iter().enumerate() {
                if n > 1 {
                    let inv = T::one() / T::of(n as f64);
                    features[r * width..(r + 1) * width].iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
        Ok(Self {
            coords: uniq,
            features,
            width,
            index,
            stride: [1; 4],
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> [i32; 4] {
        self.stride
    }

    pub fn coords(&self) -> &[Coord4] {
        &self.coords
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [T] {
        &mut self.features
    }

    pub fn index(&self) -> &HashMap<Coord4, usize> {
        &self.index
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.features[r * self.width..(r + 1) * self.width]
    }

    pub fn row_of(&self, c: &Coord4) -> Option<usize> {
        self.index.get(c).copied()
    }

    pub fn get(&self, c: &Coord4) -> Option<&[T]> {
        self.row_of(c).map(|r| self.row(r))
    }

    /// Same coordinates, new features.
    pub fn with_features(&self, features: Vec<T>, width: usize) -> Result<Self> {
        if features.len() != self.len() * width {
            return Err(Error::LengthMismatch {
                expected: self.len() * width,
                found: features.len(),
            });
        }
        Ok(Self {
            coords: self.coords.clone(),
            features,
            width,
            index: self.index.clone(),
            stride: self.stride,
        })
    }

    pub fn map_features(&self, f: impl Fn(T) -> T) -> Self {
        let mut out = self.clone();
        out.features.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    /// Columns `[start, end)` of every row.
    pub fn slice_columns(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.width);
        let w = end - start;
        let mut features = Vec::with_capacity(self.len() * w);
        for r in 0..self.len() {
            features.extend_from_slice(&self.row(r)[start..end]);
        }
        Self {
            coords: self.coords.clone(),
            features,
            width: w,
            index: self.index.clone(),
            stride: self.stride,
        }
    }

    pub fn cast<U: Real>(&self) -> SparseTensor4<U> {
        SparseTensor4 {
            coords: self.coords.clone(),
            features: self.features.iter().map(|v| U::of(v.as_f64())).collect(),
            width: self.width,
            index: self.index.clone(),
            stride: self.stride,
        }
    }

    pub fn same_coordinate_set(&self, other: &Self) -> Option<Coord4> {
        if let Some(c) = self.coords.iter().find(|c| !other.index.contains_key(c)) {
            return Some(*c);
        }
        other.coords.iter().find(|c| !self.index.contains_key(c)).copied()
    }
}

/// Concatenates feature rows of tensors sharing one coordinate set. Rows
/// follow the coordinate order of the first tensor.
pub fn concat_features<T: Real>(parts: &[&SparseTensor4<T>]) -> Result<SparseTensor4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidConfig("concat of zero tensors".into()))?;
    for p in &parts[1..] {
        if p.stride != first.stride {
            return Err(Error::StrideMismatch(format!(
                "concat of strides {:?} and {:?}",
                first.stride, p.stride
            )));
        }
        if let Some(c) = first.same_coordinate_set(p) {
            return Err(Error::CoordinateMismatch(c));
        }
    }
    let width: usize = parts.iter().map(|p| p.width).sum();
    let mut features = Vec::with_capacity(first.len() * width);
    for (r, c) in first.coords.iter().enumerate() {
        for p in parts {
            let pr = if std::ptr::eq(*p, *first) { r } else { p.index[c] };
            features.extend_from_slice(p.row(pr));
        }
    }
    Ok(SparseTensor4 {
        coords: first.coords.clone(),
        features,
        width,
        index: first.index.clone(),
        stride: first.stride,
    })
}

/// Splits a gradient of a concatenation back into per-part gradients, each
/// in its own tensor's row order.
pub fn concat_backward<T: Real>(parts: &[&SparseTensor4<T>], grad: &[T]) -> Vec<Vec<T>> {
    let first = parts[0];
    let width: usize = parts.iter().map(|p| p.width).sum();
    let mut out: Vec<Vec<T>> = parts.iter().map(|p| vec![T::zero(); p.features.len()]).collect();
    for (r, c) in first.coords.iter().enumerate() {
        let mut col = 0;
        for (k, p) in parts.iter().enumerate() {
            let pr = if k == 0 { r } else { p.index[c] };
            let g = &grad[r * width + col..r * width + col + p.width];
            out[k][pr * p.width..(pr + 1) * p.width].copy_from_slice(g);
            col += p.width;
        }
    }
    out
}
