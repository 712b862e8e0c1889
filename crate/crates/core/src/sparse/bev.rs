use serde::{Deserialize, Serialize};

use super::SparseTensor4;
use crate::error::{Error, Result};
use crate::real::Real;

/// Bird's-eye-view raster. Cell `(i, j)` covers
/// `[x_min + i*cell, x_min + (i+1)*cell) x [y_min + j*cell, ...)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevGrid {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub cell_size: f64,
    pub z_bins: usize,
}

impl Default for BevGrid {
    fn default() -> Self {
        Self {
            x_range: [-25.6, 25.6],
            y_range: [-25.6, 25.6],
            z_range: [-3.2, 3.2],
            cell_size: 1.6,
            z_bins: 16,
        }
    }
}

impl BevGrid {
    pub fn validate(&self) -> Result<()> {
        let ok = self.cell_size > 0.0
            && self.z_bins > 0
            && self.x_range[1] > self.x_range[0]
            && self.y_range[1] > self.y_range[0]
            && self.z_range[1] > self.z_range[0];
        if !ok {
            return Err(Error::InvalidConfig(format!("degenerate BEV grid {self:?}")));
        }
        Ok(())
    }

    /// Rows (along x).
    pub fn height(&self) -> usize {
        ((self.x_range[1] - self.x_range[0]) / self.cell_size - 1e-9).ceil() as usize
    }

    /// Columns (along y).
    pub fn width(&self) -> usize {
        ((self.y_range[1] - self.y_range[0]) / self.cell_size - 1e-9).ceil() as usize
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let i = ((x - self.x_range[0]) / self.cell_size).floor();
        let j = ((y - self.y_range[0]) / self.cell_size).floor();
        if i < 0.0 || j < 0.0 || i >= self.height() as f64 || j >= self.width() as f64 {
            return None;
        }
        Some((i as usize, j as usize))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_range[0] + (i as f64 + 0.5) * self.cell_size,
            self.y_range[0] + (j as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn z_bin(&self, z: f64) -> Option<usize> {
        let size = (self.z_range[1] - self.z_range[0]) / self.z_bins as f64;
        let b = ((z - self.z_range[0]) / size).floor();
        (b >= 0.0 && b < self.z_bins as f64).then_some(b as usize)
    }
}

/// Dense `channels x height x width` map.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
    /// Voxels at `t = 0` that fell outside the grid.
    pub dropped: usize,
    /// `(z_bin, i, j)` each input row was written to.
    placement: Vec<Option<(usize, usize, usize)>>,
}

impl<T: Real> BevMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
            dropped: 0,
            placement: Vec::new(),
        }
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> T {
        self.data[(c * self.height + i) * self.width + j]
    }
}

/// Stacks voxel features of the `t = 0` slice into BEV cells, one channel
/// block of `tensor.width()` per z-bin. Voxels sharing a cell and bin are
/// summed; `voxel_size` is the metric size of a unit-stride voxel.
pub fn to_bev<T: Real>(tensor: &SparseTensor4<T>, grid: &BevGrid, voxel_size: f64) -> BevMap<T> {
    let (h, w, width) = (grid.height(), grid.width(), tensor.width());
    let mut map = BevMap::zeros(grid.z_bins * width, h, w);
    let stride = tensor.stride();
    let center = |c: i32, axis: usize| (c as f64 + stride[axis] as f64 / 2.0) * voxel_size;
    map.placement = vec![None; tensor.len()];
    for (r, c) in tensor.coords().iter().enumerate() {
        if c.t != 0 {
            continue;
        }
        let cell = grid.cell_of(center(c.x, 0), center(c.y, 1));
        let bin = grid.z_bin(center(c.z, 2));
        let (Some((i, j)), Some(b)) = (cell, bin) else {
            map.dropped += 1;
            continue;
        };
        map.placement[r] = Some((b, i, j));
        for (ch, &v) in tensor.row(r).iter().enumerate() {
            let idx = ((b * width + ch) * h + i) * w + j;
            map.data[idx] += v;
        }
    }
    map
}

/// Gradient w.r.t. the tensor's features given the gradient of the map.
pub fn to_bev_backward<T: Real>(map: &BevMap<T>, tensor_width: usize, grad_map: &[T]) -> Vec<T> {
    let (h, w) = (map.height, map.width);
    let mut out = vec![T::zero(); map.placement.len() * tensor_width];
    for (r, p) in map.placement.iter().enumerate() {
        if let Some((b, i, j)) = *p {
            for ch in 0..tensor_width {
                out[r * tensor_width + ch] = grad_map[((b * tensor_width + ch) * h + i) * w + j];
            }
        }
    }
    out
}
