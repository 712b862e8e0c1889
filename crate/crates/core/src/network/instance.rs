//! Instance detection branch: sparse stages, BEV projection, center heads.

use super::config::{NetworkConfig, MOTION_FEATURE_WIDTH, POINT_INPUT_WIDTH};
use super::layers::{
    add_into, conv2d, conv2d_backward, pool_points, pool_points_backward, sigmoid, sparse_layer,
    sparse_layer_backward, SparseLayerTrace,
};
use super::params::InstanceParams;
use crate::error::{Error, Result};
use crate::losses::REGRESSION_WIDTH;
use crate::real::Real;
use crate::sparse::{to_bev, to_bev_backward, BevMap, Coord4, SparseTensor4};

/// Dense head outputs on the BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet<T> {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Sigmoid scores, `classes x height x width`.
    pub heatmap: Vec<T>,
    /// `[dx, dy, z, l, m, q, sin, cos]` per cell, `8 x height x width`.
    pub regression: Vec<T>,
    /// Final-stage voxels that fell outside the grid.
    pub dropped: usize,
}

impl<T: Real> HeatmapSet<T> {
    pub fn score(&self, c: usize, i: usize, j: usize) -> T {
        self.heatmap[(c * self.height + i) * self.width + j]
    }

    pub fn regression_at(&self, i: usize, j: usize) -> [T; REGRESSION_WIDTH] {
        std::array::from_fn(|d| self.regression[(d * self.height + i) * self.width + j])
    }
}

/// Current-scan points with their motion features attached.
#[derive(Debug, Clone, Copy)]
pub struct InstanceInput<'a, T> {
    pub positions: &'a [[f64; 3]],
    pub intensities: &'a [f64],
    /// `M x 3` MotionNet output.
    pub motion: &'a [T],
    /// Unit-stride voxel coordinates of the points (`t = 0`).
    pub coords: &'a [Coord4],
}

/// Multi-scale features plus the detection heads.
#[derive(Debug, Clone)]
pub struct InstanceOutput<T> {
    /// Pooled point features at full voxel resolution, width 7.
    pub voxel_input: SparseTensor4<T>,
    /// One tensor per stage, strides growing by `inst_strides`.
    pub pyramid: Vec<SparseTensor4<T>>,
    pub heatmaps: HeatmapSet<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct InstanceTrace<T> {
    rows: Vec<usize>,
    counts: Vec<usize>,
    stages: Vec<SparseLayerTrace<T>>,
    bev_map: BevMap<T>,
    last_width: usize,
    /// Input of each 2D layer (BEV map first) and its pre-activation output.
    bev_inputs: Vec<Vec<T>>,
    bev_pre: Vec<Vec<T>>,
    head_input: Vec<T>,
    heatmap: Vec<T>,
}

pub(crate) fn point_features<T: Real>(input: &InstanceInput<'_, T>, coord_scale: f64) -> Result<Vec<T>> {
    let m = input.positions.len();
    if input.intensities.len() != m || input.coords.len() != m {
        return Err(Error::LengthMismatch {
            expected: m,
            found: input.intensities.len().min(input.coords.len()),
        });
    }
    if input.motion.len() != m * MOTION_FEATURE_WIDTH {
        return Err(Error::WidthMismatch {
            expected: m * MOTION_FEATURE_WIDTH,
            found: input.motion.len(),
        });
    }
    let mut out = Vec::with_capacity(m * POINT_INPUT_WIDTH);
    for p in 0..m {
        out.extend(input.positions[p].iter().map(|v| T::of(v / coord_scale)));
        out.push(T::of(input.intensities[p]));
        out.extend_from_slice(&input.motion[p * MOTION_FEATURE_WIDTH..(p + 1) * MOTION_FEATURE_WIDTH]);
    }
    Ok(out)
}

pub fn instance_forward<T: Real>(
    input: &InstanceInput<'_, T>,
    params: &InstanceParams<T>,
    cfg: &NetworkConfig,
    voxel_size: f64,
) -> Result<InstanceOutput<T>> {
    Ok(instance_traced(input, params, cfg, voxel_size)?.0)
}

pub(crate) fn instance_traced<T: Real>(
    input: &InstanceInput<'_, T>,
    params: &InstanceParams<T>,
    cfg: &NetworkConfig,
    voxel_size: f64,
) -> Result<(InstanceOutput<T>, InstanceTrace<T>)> {
    let feats = point_features(input, cfg.coord_scale)?;
    let (voxel_input, rows, counts) = pool_points(input.coords, &feats, POINT_INPUT_WIDTH)?;
    let act = Some(cfg.activation);
    let mut pyramid: Vec<SparseTensor4<T>> = Vec::with_capacity(params.stages.len());
    let mut stages = Vec::with_capacity(params.stages.len());
    for p in &params.stages {
        let prev = pyramid.last().unwrap_or(&voxel_input);
        let (y, t) = sparse_layer(prev, p, act)?;
        pyramid.push(y);
        stages.push(t);
    }
    let last = pyramid.last().expect("at least one stage");
    let bev_map = to_bev(last, &cfg.bev, voxel_size);
    let (h, w) = (bev_map.height, bev_map.width);

    let mut x = bev_map.data.clone();
    let mut bev_inputs = Vec::with_capacity(params.bev.len());
    let mut bev_pre = Vec::with_capacity(params.bev.len());
    for p in &params.bev {
        let pre = conv2d(&x, h, w, p);
        let post = pre.iter().map(|v| cfg.activation.apply(*v)).collect();
        bev_inputs.push(std::mem::replace(&mut x, post));
        bev_pre.push(pre);
    }
    let heatmap: Vec<T> = conv2d(&x, h, w, &params.heatmap).into_iter().map(sigmoid).collect();
    let regression = conv2d(&x, h, w, &params.regression);
    let heatmaps = HeatmapSet {
        classes: params.heatmap.out_channels,
        height: h,
        width: w,
        heatmap: heatmap.clone(),
        regression,
        dropped: bev_map.dropped,
    };
    let trace = InstanceTrace {
        rows,
        counts,
        stages,
        last_width: last.width(),
        bev_map,
        bev_inputs,
        bev_pre,
        head_input: x,
        heatmap,
    };
    Ok((
        InstanceOutput {
            voxel_input,
            pyramid,
            heatmaps,
        },
        trace,
    ))
}

/// Backpropagates head gradients plus any gradients arriving at the pyramid
/// and the pooled input from the fusion decoder. Returns the gradient w.r.t.
/// the motion features, `M x 3`.
pub(crate) fn instance_backward<T: Real>(
    trace: &InstanceTrace<T>,
    params: &InstanceParams<T>,
    cfg: &NetworkConfig,
    grad_heatmap: &[T],
    grad_regression: &[T],
    mut grad_pyramid: Vec<Vec<T>>,
    mut grad_voxel_input: Vec<T>,
    grads: &mut InstanceParams<T>,
) -> Vec<T> {
    let (h, w) = (trace.bev_map.height, trace.bev_map.width);
    let g_logits: Vec<T> = grad_heatmap
        .iter()
        .zip(&trace.heatmap)
        .map(|(g, s)| *g * *s * (T::one() - *s))
        .collect();
    let mut g_x = conv2d_backward(&trace.head_input, h, w, &params.heatmap, &g_logits, &mut grads.heatmap);
    let g_reg_in = conv2d_backward(&trace.head_input, h, w, &params.regression, grad_regression, &mut grads.regression);
    add_into(&mut g_x, &g_reg_in);
    for l in (0..params.bev.len()).rev() {
        let g_pre: Vec<T> = g_x
            .iter()
            .zip(&trace.bev_pre[l])
            .map(|(g, p)| *g * cfg.activation.derivative(*p))
            .collect();
        g_x = conv2d_backward(&trace.bev_inputs[l], h, w, &params.bev[l], &g_pre, &mut grads.bev[l]);
    }
    let s = params.stages.len();
    let g_last = to_bev_backward(&trace.bev_map, trace.last_width, &g_x);
    add_into(&mut grad_pyramid[s - 1], &g_last);
    for k in (0..s).rev() {
        let g_in = sparse_layer_backward(&trace.stages[k], &params.stages[k], &grad_pyramid[k], &mut grads.stages[k]);
        if k == 0 {
            add_into(&mut grad_voxel_input, &g_in);
        } else {
            add_into(&mut grad_pyramid[k - 1], &g_in);
        }
    }
    let g_points = pool_points_backward(&trace.rows, &trace.counts, POINT_INPUT_WIDTH, &grad_voxel_input);
    let m = trace.rows.len();
    let mut g_motion = Vec::with_capacity(m * MOTION_FEATURE_WIDTH);
    for p in 0..m {
        let row = &g_points[p * POINT_INPUT_WIDTH..(p + 1) * POINT_INPUT_WIDTH];
        g_motion.extend_from_slice(&row[POINT_INPUT_WIDTH - MOTION_FEATURE_WIDTH..]);
    }
    g_motion
}
