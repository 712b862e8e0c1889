use super::{Coord4, SparseTensor4};
use crate::error::{Error, Result};
use crate::real::Real;

/// Tensor row each point reads from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointGather {
    pub rows: Vec<usize>,
    /// Points whose own voxel was absent and fell back to a neighbor.
    pub fallbacks: usize,
}

/// Scatters voxel features to points. `point_coords` are the unit-stride
/// voxel coordinates of the points; they are floored to the tensor's stride
/// before lookup. A point whose voxel is absent takes the nearest surviving
/// voxel in Chebyshev distance, ties broken by lexicographic coordinate.
pub fn features_to_points<T: Real>(
    tensor: &SparseTensor4<T>,
    point_coords: &[Coord4],
) -> Result<(Vec<T>, PointGather)> {
    if tensor.is_empty() && !point_coords.is_empty() {
        return Err(Error::InvalidConfig("cannot scatter an empty tensor to points".into()));
    }
    let stride = tensor.stride();
    let mut gather = PointGather {
        rows: Vec::with_capacity(point_coords.len()),
        fallbacks: 0,
    };
    for c in point_coords {
        let key = c.floor_to(stride);
        let row = match tensor.row_of(&key) {
            Some(r) => r,
            None => {
                gather.fallbacks += 1;
                nearest(tensor.coords(), key)
            }
        };
        gather.rows.push(row);
    }
    let w = tensor.width();
    let mut out = Vec::with_capacity(point_coords.len() * w);
    for &r in &gather.rows {
        out.extend_from_slice(tensor.row(r));
    }
    Ok((out, gather))
}

fn nearest(coords: &[Coord4], key: Coord4) -> usize {
    coords
        .iter()
        .enumerate()
        .min_by_key(|(_, c)| (c.chebyshev(key), **c))
        .map(|(r, _)| r)
        .expect("non-empty tensor")
}

/// Accumulates per-point gradients back onto tensor rows.
pub fn points_to_features_backward<T: Real>(gather: &PointGather, n_rows: usize, width: usize, grad_points: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); n_rows * width];
    for (p, &r) in gather.rows.iter().enumerate() {
        for k in 0..width {
            out[r * width + k] += grad_points[p * width + k];
        }
    }
    out
}
