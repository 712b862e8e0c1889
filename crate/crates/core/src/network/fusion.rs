//! Upsample fusion decoder: walks the instance pyramid back to full
//! resolution, injecting spatio-temporal and instance features per stage.

use super::config::{NetworkConfig, NUM_POINT_CLASSES};
use super::layers::{sparse_layer, sparse_layer_backward, sparse_up_layer, SparseLayerTrace};
use super::params::FusionParams;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::sparse::{
    concat_backward, concat_features, features_to_points, points_to_features_backward, Coord4, PointGather,
    SparseTensor4,
};

#[derive(Debug, Clone)]
pub(crate) struct FusionTrace<T> {
    top_parts: [SparseTensor4<T>; 2],
    top: SparseLayerTrace<T>,
    up: Vec<SparseLayerTrace<T>>,
    fuse: Vec<SparseLayerTrace<T>>,
    /// Upsampled tensor and skip tensor(s) concatenated at each level.
    fuse_parts: Vec<Vec<SparseTensor4<T>>>,
    head: SparseLayerTrace<T>,
    head_rows: usize,
    gather: PointGather,
}

/// Gradients the decoder sends back into the instance branch.
#[derive(Debug, Clone)]
pub(crate) struct FusionInputGrads<T> {
    pub pyramid: Vec<Vec<T>>,
    pub voxel_input: Vec<T>,
}

/// Per-point logits `M x 3` over (unlabeled, static, moving).
pub fn upsample_fusion_forward<T: Real>(
    voxel_input: &SparseTensor4<T>,
    pyramid: &[SparseTensor4<T>],
    instance_pyramid: &[SparseTensor4<T>],
    params: &FusionParams<T>,
    cfg: &NetworkConfig,
    point_coords: &[Coord4],
) -> Result<Vec<T>> {
    Ok(fusion_traced(voxel_input, pyramid, instance_pyramid, params, cfg, point_coords)?.0)
}

pub(crate) fn fusion_traced<T: Real>(
    voxel_input: &SparseTensor4<T>,
    pyramid: &[SparseTensor4<T>],
    instance_pyramid: &[SparseTensor4<T>],
    params: &FusionParams<T>,
    cfg: &NetworkConfig,
    point_coords: &[Coord4],
) -> Result<(Vec<T>, Option<FusionTrace<T>>)> {
    let s = params.up.len();
    if pyramid.len() != s || instance_pyramid.len() != s {
        return Err(Error::InvalidConfig(format!(
            "fusion expects {s} stages, got {} spatio-temporal and {} instance",
            pyramid.len(),
            instance_pyramid.len()
        )));
    }
    if point_coords.is_empty() || voxel_input.is_empty() {
        return Ok((Vec::new(), None));
    }
    let act = Some(cfg.activation);
    let top_in = concat_features(&[&pyramid[s - 1], &instance_pyramid[s - 1]])?;
    let (mut x, top) = sparse_layer(&top_in, &params.top, act)?;
    let mut up = vec![None; s];
    let mut fuse = vec![None; s];
    let mut fuse_parts = vec![Vec::new(); s];
    for l in (0..s).rev() {
        let target = if l == 0 { voxel_input } else { &pyramid[l - 1] };
        let (u, tu) = sparse_up_layer(&x, target, &params.up[l], act)?;
        let parts: Vec<SparseTensor4<T>> = if l == 0 {
            vec![u, voxel_input.clone()]
        } else {
            vec![u, pyramid[l - 1].clone(), instance_pyramid[l - 1].clone()]
        };
        let refs: Vec<&SparseTensor4<T>> = parts.iter().collect();
        let cat = concat_features(&refs)?;
        let (y, tf) = sparse_layer(&cat, &params.fuse[l], act)?;
        up[l] = Some(tu);
        fuse[l] = Some(tf);
        fuse_parts[l] = parts;
        x = y;
    }
    let (head_out, head) = sparse_layer(&x, &params.head, None)?;
    let (out, gather) = features_to_points(&head_out, point_coords)?;
    Ok((
        out,
        Some(FusionTrace {
            top_parts: [pyramid[s - 1].clone(), instance_pyramid[s - 1].clone()],
            top,
            up: up.into_iter().map(|t| t.expect("set")).collect(),
            fuse: fuse.into_iter().map(|t| t.expect("set")).collect(),
            fuse_parts,
            head,
            head_rows: head_out.len(),
            gather,
        }),
    ))
}

/// Instance features are treated as constants; gradients flow into the
/// spatio-temporal pyramid and the pooled voxel input only.
pub(crate) fn fusion_backward<T: Real>(
    trace: &FusionTrace<T>,
    params: &FusionParams<T>,
    grad_points: &[T],
    grads: &mut FusionParams<T>,
) -> FusionInputGrads<T> {
    let s = params.up.len();
    let g_head = points_to_features_backward(&trace.gather, trace.head_rows, NUM_POINT_CLASSES, grad_points);
    let mut g_x = sparse_layer_backward(&trace.head, &params.head, &g_head, &mut grads.head);
    let mut pyramid: Vec<Vec<T>> = (0..s).map(|_| Vec::new()).collect();
    let mut voxel_input = Vec::new();
    for l in 0..s {
        let g_cat = sparse_layer_backward(&trace.fuse[l], &params.fuse[l], &g_x, &mut grads.fuse[l]);
        let refs: Vec<&SparseTensor4<T>> = trace.fuse_parts[l].iter().collect();
        let mut parts = concat_backward(&refs, &g_cat).into_iter();
        let g_u = parts.next().expect("upsampled part");
        let g_skip = parts.next().expect("skip part");
        if l == 0 {
            voxel_input = g_skip;
        } else {
            pyramid[l - 1] = g_skip;
        }
        g_x = sparse_layer_backward(&trace.up[l], &params.up[l], &g_u, &mut grads.up[l]);
    }
    let g_top = sparse_layer_backward(&trace.top, &params.top, &g_x, &mut grads.top);
    let mut top = concat_backward(&[&trace.top_parts[0], &trace.top_parts[1]], &g_top);
    top.truncate(1);
    let g_last = top.pop().expect("spatio-temporal part");
    pyramid[s - 1] = g_last;
    FusionInputGrads { pyramid, voxel_input }
}
