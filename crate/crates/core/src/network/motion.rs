//! MotionNet: a shallow 4D sparse hourglass over all input scans.

use super::config::{NetworkConfig, MOTION_FEATURE_WIDTH};
use super::layers::{add_into, sparse_layer, sparse_layer_backward, sparse_up_layer, SparseLayerTrace};
use super::params::MotionParams;
use crate::error::Result;
use crate::real::Real;
use crate::sparse::{
    concat_backward, concat_features, features_to_points, points_to_features_backward, Coord4, PointGather,
    SparseTensor4,
};

/// Occupancy tensor fed to MotionNet: one unit feature per voxel.
pub fn occupancy<T: Real>(coords: &[Coord4]) -> Result<SparseTensor4<T>> {
    SparseTensor4::from_parts(coords.to_vec(), vec![T::one(); coords.len()], 1, [1; 4])
}

#[derive(Debug, Clone)]
pub(crate) struct MotionTrace<T> {
    stem: SparseLayerTrace<T>,
    down: Vec<SparseLayerTrace<T>>,
    up: Vec<SparseLayerTrace<T>>,
    fuse: Vec<SparseLayerTrace<T>>,
    head: SparseLayerTrace<T>,
    enc: Vec<SparseTensor4<T>>,
    ups: Vec<SparseTensor4<T>>,
    head_rows: usize,
    gather: PointGather,
}

/// Per-point motion features `M x 3` for the current scan points whose
/// unit-stride voxel coordinates are `point_coords`.
pub fn motionnet_forward<T: Real>(
    voxels: &SparseTensor4<T>,
    params: &MotionParams<T>,
    cfg: &NetworkConfig,
    point_coords: &[Coord4],
) -> Result<Vec<T>> {
    Ok(motion_traced(voxels, params, cfg, point_coords)?.0)
}

pub(crate) fn motion_traced<T: Real>(
    voxels: &SparseTensor4<T>,
    params: &MotionParams<T>,
    cfg: &NetworkConfig,
    point_coords: &[Coord4],
) -> Result<(Vec<T>, Option<MotionTrace<T>>)> {
    if voxels.is_empty() || point_coords.is_empty() {
        return Ok((Vec::new(), None));
    }
    let act = Some(cfg.activation);
    let (x, stem) = sparse_layer(voxels, &params.stem, act)?;
    let mut enc = vec![x];
    let mut down = Vec::with_capacity(params.down.len());
    for p in &params.down {
        let (y, t) = sparse_layer(enc.last().expect("stem output"), p, act)?;
        enc.push(y);
        down.push(t);
    }
    let levels = params.down.len();
    let mut up = vec![None; levels];
    let mut fuse = vec![None; levels];
    let mut ups = vec![None; levels];
    let mut d = enc[levels].clone();
    for i in (0..levels).rev() {
        let (u, tu) = sparse_up_layer(&d, &enc[i], &params.up[i], act)?;
        let cat = concat_features(&[&u, &enc[i]])?;
        let (y, tf) = sparse_layer(&cat, &params.fuse[i], act)?;
        up[i] = Some(tu);
        fuse[i] = Some(tf);
        ups[i] = Some(u);
        d = y;
    }
    let (head_out, head) = sparse_layer(&d, &params.head, None)?;
    let (out, gather) = features_to_points(&head_out, point_coords)?;
    let trace = MotionTrace {
        stem,
        down,
        up: up.into_iter().map(|t| t.expect("set")).collect(),
        fuse: fuse.into_iter().map(|t| t.expect("set")).collect(),
        head,
        enc,
        ups: ups.into_iter().map(|t| t.expect("set")).collect(),
        head_rows: head_out.len(),
        gather,
    };
    Ok((out, Some(trace)))
}

/// Accumulates parameter gradients given the gradient of the per-point output.
pub(crate) fn motion_backward<T: Real>(
    trace: &MotionTrace<T>,
    params: &MotionParams<T>,
    grad_points: &[T],
    grads: &mut MotionParams<T>,
) {
    let g_head = points_to_features_backward(&trace.gather, trace.head_rows, MOTION_FEATURE_WIDTH, grad_points);
    let mut g_d = sparse_layer_backward(&trace.head, &params.head, &g_head, &mut grads.head);
    let levels = trace.down.len();
    let mut g_enc: Vec<Vec<T>> = trace
        .enc
        .iter()
        .map(|e| vec![T::zero(); e.features().len()])
        .collect();
    for i in 0..levels {
        let g_cat = sparse_layer_backward(&trace.fuse[i], &params.fuse[i], &g_d, &mut grads.fuse[i]);
        let mut parts = concat_backward(&[&trace.ups[i], &trace.enc[i]], &g_cat);
        let g_skip = parts.pop().expect("two parts");
        let g_u = parts.pop().expect("two parts");
        add_into(&mut g_enc[i], &g_skip);
        g_d = sparse_layer_backward(&trace.up[i], &params.up[i], &g_u, &mut grads.up[i]);
    }
    add_into(&mut g_enc[levels], &g_d);
    for i in (0..levels).rev() {
        let g = sparse_layer_backward(&trace.down[i], &params.down[i], &g_enc[i + 1], &mut grads.down[i]);
        add_into(&mut g_enc[i], &g);
    }
    sparse_layer_backward(&trace.stem, &params.stem, &g_enc[0], &mut grads.stem);
}
