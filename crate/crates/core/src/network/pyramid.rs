use super::config::instance_feature_width;
use crate::error::Result;
use crate::instances::InstancePrediction;
use crate::real::Real;
use crate::sparse::SparseTensor4;

/// Per-voxel instance encoding for one stage. A voxel whose metric center
/// lies in a box gets `[one-hot class, score, offset / size]`, the offset
/// taken in the box frame; the highest-scoring containing box wins and
/// earlier boxes win ties. Voxels outside every box are zero.
pub fn instance_features<T: Real>(
    instances: &[InstancePrediction],
    stage: &SparseTensor4<T>,
    voxel_size: f64,
    num_classes: usize,
) -> Result<SparseTensor4<T>> {
    let width = instance_feature_width(num_classes);
    let stride = stage.stride();
    let mut feats = vec![T::zero(); stage.len() * width];
    if !instances.is_empty() {
        for (r, c) in stage.coords().iter().enumerate() {
            let center = [
                (c.x as f64 + stride[0] as f64 / 2.0) * voxel_size,
                (c.y as f64 + stride[1] as f64 / 2.0) * voxel_size,
                (c.z as f64 + stride[2] as f64 / 2.0) * voxel_size,
            ];
            let best = instances
                .iter()
                .filter(|b| b.class.index() < num_classes && b.contains(center))
                .fold(None::<&InstancePrediction>, |acc, b| match acc {
                    Some(a) if a.score >= b.score => Some(a),
                    _ => Some(b),
                });
            if let Some(b) = best {
                let row = &mut feats[r * width..(r + 1) * width];
                row[b.class.index()] = T::one();
                row[num_classes] = T::of(b.score);
                let local = b.to_box_frame(center);
                for k in 0..3 {
                    row[num_classes + 1 + k] = T::of(local[k] / b.size[k]);
                }
            }
        }
    }
    stage.with_features(feats, width)
}

/// Instance features for every stage of the pyramid.
pub fn build_instance_pyramid<T: Real>(
    instances: &[InstancePrediction],
    pyramid: &[SparseTensor4<T>],
    voxel_size: f64,
    num_classes: usize,
) -> Result<Vec<SparseTensor4<T>>> {
    pyramid
        .iter()
        .map(|s| instance_features(instances, s, voxel_size, num_classes))
        .collect()
}
