//! Training losses: point-wise cross-entropy, a focal loss on Gaussian
//! heatmap targets, smooth-L1 box regression, and their unweighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointClass;
use crate::instances::InstancePrediction;
use crate::real::Real;
use crate::sparse::BevGrid;

/// Heatmap probabilities are clamped into `[EPS, 1 - EPS]` before logs.
pub const HEATMAP_EPS: f64 = 1e-6;
/// Gaussian bump radius never drops below this many cells.
pub const MIN_BUMP_RADIUS: f64 = 2.0;
pub const REGRESSION_WIDTH: usize = 8;

/// A scalar loss and its gradient w.r.t. the first argument.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

fn softmax_row<T: Real>(row: &[T]) -> [T; 3] {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e = [(row[0] - m).exp(), (row[1] - m).exp(), (row[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

/// `-sum_i log softmax(logits_i)[target_i]` over `n x 3` logits.
pub fn cross_entropy<T: Real>(logits: &[T], targets: &[PointClass], reduction: Reduction) -> Result<LossValue<T>> {
    if logits.len() != targets.len() * 3 {
        return Err(Error::LengthMismatch {
            expected: targets.len() * 3,
            found: logits.len(),
        });
    }
    let n = targets.len();
    if n == 0 {
        return Ok(LossValue {
            value: T::zero(),
            grad: Vec::new(),
        });
    }
    let scale = match reduction {
        Reduction::Sum => T::one(),
        Reduction::Mean => T::one() / T::of(n as f64),
    };
    let mut value = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits[i * 3..i * 3 + 3];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        value += lse - row[t.index()];
        let p = softmax_row(row);
        for k in 0..3 {
            let onehot = if k == t.index() { T::one() } else { T::zero() };
            grad[i * 3 + k] = (p[k] - onehot) * scale;
        }
    }
    Ok(LossValue {
        value: value * scale,
        grad,
    })
}

/// Per-class heatmap targets with one exact peak per object.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTargets {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// `classes x height x width`, values in `[0, 1]`.
    pub data: Vec<f64>,
    /// `(class, i, j)` center cell of every encoded object.
    pub centers: Vec<(usize, usize, usize)>,
    /// Objects whose center fell outside the grid or whose class is not modeled.
    pub skipped: usize,
}

impl GaussianTargets {
    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    /// Number of encoded objects.
    pub fn instance_count(&self) -> usize {
        self.centers.len()
    }
}

/// Bump radius in cells: half the larger footprint side, at least
/// [`MIN_BUMP_RADIUS`].
pub fn bump_radius(b: &InstancePrediction, grid: &BevGrid) -> f64 {
    (0.5 * b.size[0].max(b.size[1]) / grid.cell_size).max(MIN_BUMP_RADIUS)
}

/// Encodes boxes as `exp(-d^2 / (2 rho^2))` bumps around their center cells,
/// taking the elementwise max where bumps overlap.
pub fn gaussian_targets(boxes: &[InstancePrediction], grid: &BevGrid, classes: usize) -> GaussianTargets {
    let (h, w) = (grid.height(), grid.width());
    let mut out = GaussianTargets {
        classes,
        height: h,
        width: w,
        data: vec![0.0; classes * h * w],
        centers: Vec::new(),
        skipped: 0,
    };
    for b in boxes {
        let c = b.class.index();
        let Some((i0, j0)) = grid.cell_of(b.center[0], b.center[1]).filter(|_| c < classes) else {
            out.skipped += 1;
            continue;
        };
        let rho = bump_radius(b, grid);
        for i in 0..h {
            for j in 0..w {
                let d2 = (i as f64 - i0 as f64).powi(2) + (j as f64 - j0 as f64).powi(2);
                let g = (-d2 / (2.0 * rho * rho)).exp();
                let cell = &mut out.data[(c * h + i) * w + j];
                *cell = cell.max(g);
            }
        }
        out.centers.push((c, i0, j0));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    /// Exponent on the prediction terms.
    pub sigma: f64,
    /// Exponent on the `(1 - g)` penalty reduction.
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { sigma: 2.0, gamma: 4.0 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!("focal exponents must be > 0: {self:?}")));
        }
        Ok(())
    }
}

/// Focal loss over heatmap probabilities `pred` (`C x H x W`), normalized by
/// the instance count `u`. The gradient is w.r.t. the probabilities.
pub fn focal_loss<T: Real>(pred: &[T], g: &GaussianTargets, fp: &FocalParams, u: usize) -> Result<LossValue<T>> {
    fp.validate()?;
    if pred.len() != g.data.len() {
        return Err(Error::LengthMismatch {
            expected: g.data.len(),
            found: pred.len(),
        });
    }
    if u == 0 {
        if g.data.iter().any(|v| *v != 0.0) {
            return Err(Error::InvalidConfig("focal loss with zero instances but non-zero targets".into()));
        }
        return Ok(LossValue {
            value: T::zero(),
            grad: vec![T::zero(); pred.len()],
        });
    }
    let (eps, one) = (T::of(HEATMAP_EPS), T::one());
    let sigma = T::of(fp.sigma);
    let scale = -one / T::of(u as f64);
    let mut value = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    for (k, (&raw, &gk)) in pred.iter().zip(&g.data).enumerate() {
        let clamped = raw < eps || raw > one - eps;
        let e = raw.max(eps).min(one - eps);
        let (term, dterm) = if gk >= 1.0 {
            let a = (one - e).powf(sigma);
            let le = e.ln();
            (a * le, -sigma * (one - e).powf(sigma - one) * le + a / e)
        } else {
            let wgt = T::of((1.0 - gk).powf(fp.gamma));
            let es = e.powf(sigma);
            let l1e = (one - e).ln();
            (wgt * es * l1e, wgt * (sigma * e.powf(sigma - one) * l1e - es / (one - e)))
        };
        value += term;
        if !clamped {
            grad[k] = scale * dterm;
        }
    }
    Ok(LossValue {
        value: scale * value,
        grad,
    })
}

/// `(1/U) sum_u sum_d h(pred - target)` over `U x 8` rows.
pub fn smooth_l1<T: Real>(pred: &[T], target: &[T]) -> Result<LossValue<T>> {
    if pred.len() != target.len() || pred.len() % REGRESSION_WIDTH != 0 {
        return Err(Error::LengthMismatch {
            expected: target.len(),
            found: pred.len(),
        });
    }
    let u = pred.len() / REGRESSION_WIDTH;
    if u == 0 {
        return Ok(LossValue {
            value: T::zero(),
            grad: Vec::new(),
        });
    }
    let inv = T::one() / T::of(u as f64);
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        let (h, dh) = if d.abs() < T::one() {
            (T::of(0.5) * d * d, d)
        } else {
            (d.abs() - T::of(0.5), d.signum())
        };
        value += h;
        grad.push(dh * inv);
    }
    Ok(LossValue {
        value: value * inv,
        grad,
    })
}

/// Regression target `[dx, dy, z, l, m, q, sin yaw, cos yaw]` of a box at its
/// center cell; `dx, dy` are offsets from the cell center in cell units.
pub fn regression_target(b: &InstancePrediction, grid: &BevGrid) -> Option<((usize, usize), [f64; REGRESSION_WIDTH])> {
    let (i, j) = grid.cell_of(b.center[0], b.center[1])?;
    let (cx, cy) = grid.cell_center(i, j);
    let (s, c) = b.yaw.sin_cos();
    Some((
        (i, j),
        [
            (b.center[0] - cx) / grid.cell_size,
            (b.center[1] - cy) / grid.cell_size,
            b.center[2],
            b.size[0],
            b.size[1],
            b.size[2],
            s,
            c,
        ],
    ))
}

/// Loss components and their sum. `*_sum` fields hold the unnormalized
/// cross-entropy sums.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_motion: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_mos: f64,
    pub l_total: f64,
    pub l_motion_sum: f64,
    pub l_mos_sum: f64,
}

impl LossReport {
    pub fn from_components(l_motion: f64, l_cls: f64, l_reg: f64, l_mos: f64) -> Self {
        Self {
            l_motion,
            l_cls,
            l_reg,
            l_mos,
            l_total: l_motion + l_cls + l_reg + l_mos,
            l_motion_sum: l_motion,
            l_mos_sum: l_mos,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_motion, self.l_cls, self.l_reg, self.l_mos, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Network outputs the total loss is evaluated on.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a, T> {
    /// MotionNet output per current point, `M x 3`, used directly as logits.
    pub motion_logits: &'a [T],
    /// Fusion decoder output per current point, `M x 3`.
    pub fusion_logits: &'a [T],
    pub gt_labels: &'a [PointClass],
    /// Heatmap probabilities, `C x H x W`.
    pub heatmap: &'a [T],
    pub targets: &'a GaussianTargets,
    /// Regression map, `8 x H x W`.
    pub regression: &'a [T],
    pub gt_boxes: &'a [InstancePrediction],
    pub grid: &'a BevGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalGrads<T> {
    pub motion_logits: Vec<T>,
    pub fusion_logits: Vec<T>,
    pub heatmap: Vec<T>,
    pub regression: Vec<T>,
}

/// Unweighted sum of motion, classification, regression and segmentation losses.
pub fn total_loss<T: Real>(
    inp: &LossInputs<'_, T>,
    fp: &FocalParams,
    reduction: Reduction,
) -> Result<(LossReport, TotalGrads<T>)> {
    let motion = cross_entropy(inp.motion_logits, inp.gt_labels, reduction)?;
    let mos = cross_entropy(inp.fusion_logits, inp.gt_labels, reduction)?;
    let motion_sum = cross_entropy(inp.motion_logits, inp.gt_labels, Reduction::Sum)?.value;
    let mos_sum = cross_entropy(inp.fusion_logits, inp.gt_labels, Reduction::Sum)?.value;

    let u = inp.targets.instance_count();
    let cls = focal_loss(inp.heatmap, inp.targets, fp, u)?;

    let (h, w) = (inp.targets.height, inp.targets.width);
    if inp.regression.len() != REGRESSION_WIDTH * h * w {
        return Err(Error::LengthMismatch {
            expected: REGRESSION_WIDTH * h * w,
            found: inp.regression.len(),
        });
    }
    let mut pred = Vec::new();
    let mut target = Vec::new();
    let mut cells = Vec::new();
    for b in inp.gt_boxes {
        if b.class.index() >= inp.targets.classes {
            continue;
        }
        if let Some(((i, j), t)) = regression_target(b, inp.grid) {
            for (d, tv) in t.iter().enumerate() {
                pred.push(inp.regression[(d * h + i) * w + j]);
                target.push(T::of(*tv));
            }
            cells.push((i, j));
        }
    }
    let reg = smooth_l1(&pred, &target)?;
    let mut reg_grad = vec![T::zero(); inp.regression.len()];
    for (u, &(i, j)) in cells.iter().enumerate() {
        for d in 0..REGRESSION_WIDTH {
            reg_grad[(d * h + i) * w + j] += reg.grad[u * REGRESSION_WIDTH + d];
        }
    }

    let mut report = LossReport::from_components(
        motion.value.as_f64(),
        cls.value.as_f64(),
        reg.value.as_f64(),
        mos.value.as_f64(),
    );
    report.l_motion_sum = motion_sum.as_f64();
    report.l_mos_sum = mos_sum.as_f64();
    Ok((
        report,
        TotalGrads {
            motion_logits: motion.grad,
            fusion_logits: mos.grad,
            heatmap: cls.grad,
            regression: reg_grad,
        },
    ))
}
