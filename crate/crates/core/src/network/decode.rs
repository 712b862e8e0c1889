use super::config::DecodeConfig;
use super::instance::HeatmapSet;
use crate::instances::{InstanceClass, InstancePrediction};
use crate::real::Real;
use crate::sparse::BevGrid;

/// Smallest decoded box extent in meters.
pub const MIN_BOX_SIZE: f64 = 1e-3;

/// Extracts heatmap peaks as boxes. A cell is a peak when its score is at
/// least every 8-neighbor's and at least the threshold; peaks are ordered by
/// score, then by flat index `c*H*W + i*W + j`, and truncated to `top_k`.
pub fn decode_instances<T: Real>(h: &HeatmapSet<T>, cfg: &DecodeConfig, grid: &BevGrid) -> Vec<InstancePrediction> {
    let (hh, ww) = (h.height, h.width);
    let mut peaks: Vec<(f64, usize, usize, usize)> = Vec::new();
    for c in 0..h.classes {
        for i in 0..hh {
            for j in 0..ww {
                let s = h.score(c, i, j).as_f64();
                if !(s >= cfg.score_threshold) {
                    continue;
                }
                let is_peak = (-1isize..=1).all(|di| {
                    (-1isize..=1).all(|dj| {
                        let (ni, nj) = (i as isize + di, j as isize + dj);
                        if (di == 0 && dj == 0) || ni < 0 || nj < 0 || ni >= hh as isize || nj >= ww as isize {
                            return true;
                        }
                        s >= h.score(c, ni as usize, nj as usize).as_f64()
                    })
                });
                if is_peak {
                    peaks.push((s, c, i, j));
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| (a.1 * hh * ww + a.2 * ww + a.3).cmp(&(b.1 * hh * ww + b.2 * ww + b.3)))
    });
    peaks.truncate(cfg.top_k);
    peaks
        .into_iter()
        .filter_map(|(s, c, i, j)| {
            let class = InstanceClass::from_index(c)?;
            let r = h.regression_at(i, j).map(|v| v.as_f64());
            let (cx, cy) = grid.cell_center(i, j);
            let size = [r[3], r[4], r[5]].map(|v| if v.is_finite() { v.abs().max(MIN_BOX_SIZE) } else { MIN_BOX_SIZE });
            let norm = (r[6] * r[6] + r[7] * r[7]).sqrt();
            let yaw = if norm > 0.0 && norm.is_finite() { (r[6] / norm).atan2(r[7] / norm) } else { 0.0 };
            let center = [cx + r[0] * grid.cell_size, cy + r[1] * grid.cell_size, r[2]];
            if center.iter().any(|v| !v.is_finite()) {
                return None;
            }
            Some(InstancePrediction {
                class,
                score: s.clamp(0.0, 1.0),
                center,
                size,
                yaw,
            })
        })
        .collect()
}
