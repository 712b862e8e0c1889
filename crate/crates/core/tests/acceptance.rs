//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero when any criterion fails.
//!
//! Pass a substring of a criterion name to run a subset.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use insmos::config::ModelConfig;
use insmos::dataio::{self, FrameBoxes, LabelMapping};
use insmos::geometry::{compose_poses, quantize, LidarPoint, PointClass, Pose, QuantizationConfig, Scan, TimedPoint};
use insmos::harness::{
    confusion, evaluate_sequence, generate_scene, iou, mean_loss, probe_frames, train_toy, training_frames,
    ConfusionCounts, SceneSpec, SequenceReport,
};
use insmos::instances::{InstanceClass, InstancePrediction};
use insmos::losses::{
    cross_entropy, focal_loss, gaussian_targets, smooth_l1, total_loss, FocalParams, LossInputs, Reduction,
    REGRESSION_WIDTH,
};
use insmos::network::{
    forward_backward, frame_loss, init_params, prepare_frame, DecodeConfig, FrameTargets, LossConfig, MovingLabels,
    NetworkConfig, Params,
};
use insmos::refinement::{refine, RefinementConfig, RefinementState};
use insmos::sparse::{kernel_offsets, sparse_conv, BevGrid, ConvParams, Coord4, SparseTensor4};
use nalgebra::{Matrix4, Vector4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

const CRITERIA: [(&str, fn() -> Outcome); 9] = [
    ("sparse convolution matches dense oracle", sparse_conv_oracle),
    ("analytic gradients match finite differences", gradient_suite),
    ("refinement matches reference transliteration", refinement_oracle),
    ("refinement is monotone and local", refinement_invariants),
    ("moving IoU matches brute-force counting", metric_suite),
    ("pose algebra and quantization", geometry_suite),
    ("toy training converges and generalizes", toy_training),
    ("refinement latency at 100k points", refinement_latency),
    ("file formats round-trip and reject truncation", io_suite),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        for (name, _) in CRITERIA {
            println!("{name}: test");
        }
        return;
    }
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (k, (name, run)) in CRITERIA.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("[{}] PASS {name}: {detail} ({secs:.1} s)", k + 1),
            Err(detail) => {
                failed += 1;
                println!("[{}] FAIL {name}: {detail} ({secs:.1} s)", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------------------
// Sparse convolution

fn dense_conv_at(
    dense: &HashMap<[i32; 4], Vec<f64>>,
    params: &ConvParams<f64>,
    offsets: &[[i32; 4]],
    o: [i32; 4],
) -> Vec<f64> {
    let (cin, cout) = (params.in_width, params.out_width);
    let mut y = params.bias.clone().unwrap_or_else(|| vec![0.0; cout]);
    for (k, d) in offsets.iter().enumerate() {
        let at = [o[0] + d[0], o[1] + d[1], o[2] + d[2], o[3] + d[3]];
        if let Some(x) = dense.get(&at) {
            for (i, xi) in x.iter().enumerate() {
                for (oc, yo) in y.iter_mut().enumerate() {
                    *yo += xi * params.weights[(k * cin + i) * cout + oc];
                }
            }
        }
    }
    y
}

fn sparse_conv_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut worst_f32 = 0.0f64;
    let cases = 150;
    for case in 0..cases {
        let dims: [i32; 4] = std::array::from_fn(|_| rng.gen_range(1..=6));
        let lo: [i32; 4] = std::array::from_fn(|_| rng.gen_range(-7..=3));
        let density = rng.gen_range(0.05..0.6);
        let mut coords = Vec::new();
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    for t in 0..dims[3] {
                        if rng.gen_bool(density) {
                            coords.push(Coord4::new(lo[0] + x, lo[1] + y, lo[2] + z, lo[3] + t));
                        }
                    }
                }
            }
        }
        if coords.is_empty() {
            coords.push(Coord4::from_array(lo));
        }
        coords.shuffle(&mut rng);
        let kernel: [usize; 4] = std::array::from_fn(|_| *[1usize, 3, 3, 5].choose(&mut rng).unwrap());
        let stride: [i32; 4] = if rng.gen_bool(0.5) {
            [1; 4]
        } else {
            std::array::from_fn(|_| rng.gen_range(1..=2))
        };
        let (cin, cout) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let bias = rng.gen_bool(0.5);
        let params = ConvParams::<f64>::random(&mut rng, kernel, stride, cin, cout, bias);
        let features: Vec<f64> = (0..coords.len() * cin).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input = SparseTensor4::from_parts(coords.clone(), features.clone(), cin, [1; 4]).unwrap();
        let out = sparse_conv(&input, &params).unwrap();

        let dense: HashMap<[i32; 4], Vec<f64>> = coords
            .iter()
            .enumerate()
            .map(|(r, c)| (c.to_array(), features[r * cin..(r + 1) * cin].to_vec()))
            .collect();
        let offsets = kernel_offsets(kernel).unwrap();
        let floor = |v: i32, s: i32| v.div_euclid(s) * s;
        let expected: HashMap<[i32; 4], Vec<f64>> = coords
            .iter()
            .map(|c| {
                let a = c.to_array();
                let o: [i32; 4] = std::array::from_fn(|ax| floor(a[ax], stride[ax]));
                (o, dense_conv_at(&dense, &params, &offsets, o))
            })
            .collect();

        ensure!(out.stride() == stride, "case {case}: output stride {:?}, expected {stride:?}", out.stride());
        ensure!(
            out.len() == expected.len(),
            "case {case}: {} output sites, expected {}",
            out.len(),
            expected.len()
        );
        for (r, c) in out.coords().iter().enumerate() {
            let Some(want) = expected.get(&c.to_array()) else {
                return Err(format!("case {case}: unexpected output site {c:?}"));
            };
            for (got, w) in out.row(r).iter().zip(want) {
                worst = worst.max(rel_err(*got, *w, 1e-9));
            }
        }

        // Single precision against the f64 oracle, relative to the magnitude of the summed terms.
        let out32 = sparse_conv(&input.cast::<f32>(), &params_cast(&params)).unwrap();
        for (r, c) in out32.coords().iter().enumerate() {
            let want = &expected[&c.to_array()];
            let scale = magnitude(&dense, &params, &offsets, c.to_array());
            for (oc, (got, w)) in out32.row(r).iter().zip(want).enumerate() {
                worst_f32 = worst_f32.max((*got as f64 - w).abs() / scale[oc].max(1e-12));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst < 1e-5, "max relative error {worst:e} (f64)");
    ensure!(worst_f32 < 1e-5, "max relative error {worst_f32:e} (f32)");
    ensure!(secs < 30.0, "took {secs:.1} s");
    Ok(format!("{cases} cases, max rel err {worst:.1e} (f64), {worst_f32:.1e} (f32)"))
}

fn params_cast(p: &ConvParams<f64>) -> ConvParams<f32> {
    ConvParams {
        kernel: p.kernel,
        stride: p.stride,
        in_width: p.in_width,
        out_width: p.out_width,
        weights: p.weights.iter().map(|&w| w as f32).collect(),
        bias: p.bias.as_ref().map(|b| b.iter().map(|&v| v as f32).collect()),
    }
}

fn magnitude(
    dense: &HashMap<[i32; 4], Vec<f64>>,
    params: &ConvParams<f64>,
    offsets: &[[i32; 4]],
    o: [i32; 4],
) -> Vec<f64> {
    let abs = ConvParams {
        weights: params.weights.iter().map(|w| w.abs()).collect(),
        bias: params.bias.as_ref().map(|b| b.iter().map(|v| v.abs()).collect()),
        ..params.clone()
    };
    let dense_abs = dense.iter().map(|(k, v)| (*k, v.iter().map(|x| x.abs()).collect())).collect();
    dense_conv_at(&dense_abs, &abs, offsets, o)
}

// ---------------------------------------------------------------------------
// Gradients

fn check_fd(name: &str, x: &[f64], grad: &[f64], picks: &[usize], h: f64, tol: f64, f: impl Fn(&[f64]) -> f64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    let mut v = x.to_vec();
    let floor = 1e-5 * f(x).abs().max(1.0);
    for &k in picks {
        v[k] = x[k] + h;
        let fp = f(&v);
        v[k] = x[k] - h;
        let fm = f(&v);
        v[k] = x[k];
        let fd = (fp - fm) / (2.0 * h);
        let err = rel_err(fd, grad[k], floor);
        ensure!(err < tol, "{name} entry {k}: finite difference {fd:e}, analytic {:e}", grad[k]);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<PointClass> {
    (0..n)
        .map(|_| *[PointClass::Unlabeled, PointClass::Static, PointClass::Moving].choose(rng).unwrap())
        .collect()
}

fn small_grid() -> BevGrid {
    BevGrid {
        x_range: [-4.0, 4.0],
        y_range: [-4.0, 4.0],
        z_range: [-2.0, 2.0],
        cell_size: 0.5,
        z_bins: 4,
    }
}

fn grid_boxes() -> Vec<InstancePrediction> {
    vec![
        InstancePrediction::new(InstanceClass::Car, [1.3, -0.6, 0.2], [3.9, 1.7, 1.5], 0.4),
        InstancePrediction::new(InstanceClass::Car, [-2.2, 1.9, 0.1], [4.2, 1.9, 1.6], -1.1),
        InstancePrediction::new(InstanceClass::Pedestrian, [0.4, 2.6, 0.0], [0.6, 0.7, 1.8], 2.0),
    ]
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let h = 1e-5;
    let mut worst = 0.0f64;

    for reduction in [Reduction::Mean, Reduction::Sum] {
        let n = 30;
        let logits: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels = random_labels(&mut rng, n);
        let g = cross_entropy(&logits, &labels, reduction).unwrap().grad;
        let all: Vec<usize> = (0..logits.len()).collect();
        worst = worst.max(check_fd("cross entropy", &logits, &g, &all, h, 1e-4, |v| {
            cross_entropy(v, &labels, reduction).unwrap().value
        })?);
    }

    let grid = small_grid();
    let classes = NetworkConfig::toy().num_classes;
    let boxes = grid_boxes();
    let targets = gaussian_targets(&boxes, &grid, classes);
    let fp = FocalParams::default();
    let pred: Vec<f64> = (0..targets.data.len()).map(|_| rng.gen_range(0.01..0.99)).collect();
    let u = targets.instance_count();
    let g = focal_loss(&pred, &targets, &fp, u).unwrap().grad;
    let all: Vec<usize> = (0..pred.len()).collect();
    worst = worst.max(check_fd("focal", &pred, &g, &all, h, 1e-4, |v| {
        focal_loss(v, &targets, &fp, u).unwrap().value
    })?);

    let target: Vec<f64> = (0..5 * REGRESSION_WIDTH).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let pred: Vec<f64> = target
        .iter()
        .map(|t| loop {
            let d: f64 = rng.gen_range(-3.0..3.0);
            if (d.abs() - 1.0).abs() > 1e-2 {
                break t + d;
            }
        })
        .collect();
    let g = smooth_l1(&pred, &target).unwrap().grad;
    let all: Vec<usize> = (0..pred.len()).collect();
    worst = worst.max(check_fd("smooth l1", &pred, &g, &all, h, 1e-4, |v| smooth_l1(v, &target).unwrap().value)?);

    let n = 25;
    let labels = random_labels(&mut rng, n);
    let (hh, ww) = (targets.height, targets.width);
    let motion: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let fusion: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let heatmap: Vec<f64> = (0..targets.data.len()).map(|_| rng.gen_range(0.01..0.99)).collect();
    let regression: Vec<f64> = (0..REGRESSION_WIDTH * hh * ww).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let inputs = |m: &[f64], f: &[f64], hm: &[f64], r: &[f64]| -> f64 {
        let inp = LossInputs {
            motion_logits: m,
            fusion_logits: f,
            gt_labels: &labels,
            heatmap: hm,
            targets: &targets,
            regression: r,
            gt_boxes: &boxes,
            grid: &grid,
        };
        total_loss(&inp, &fp, Reduction::Mean).unwrap().0.l_total
    };
    let (_, grads) = total_loss(
        &LossInputs {
            motion_logits: &motion,
            fusion_logits: &fusion,
            gt_labels: &labels,
            heatmap: &heatmap,
            targets: &targets,
            regression: &regression,
            gt_boxes: &boxes,
            grid: &grid,
        },
        &fp,
        Reduction::Mean,
    )
    .unwrap();
    let all_logits: Vec<usize> = (0..motion.len()).collect();
    worst = worst.max(check_fd("total/motion", &motion, &grads.motion_logits, &all_logits, h, 1e-4, |v| {
        inputs(v, &fusion, &heatmap, &regression)
    })?);
    worst = worst.max(check_fd("total/fusion", &fusion, &grads.fusion_logits, &all_logits, h, 1e-4, |v| {
        inputs(&motion, v, &heatmap, &regression)
    })?);
    let hm_picks: Vec<usize> = (0..200).map(|_| rng.gen_range(0..heatmap.len())).collect();
    worst = worst.max(check_fd("total/heatmap", &heatmap, &grads.heatmap, &hm_picks, h, 1e-4, |v| {
        inputs(&motion, &fusion, v, &regression)
    })?);
    let mut reg_picks: Vec<usize> = (0..regression.len()).filter(|&k| grads.regression[k] != 0.0).collect();
    ensure!(!reg_picks.is_empty(), "regression gradient is identically zero");
    reg_picks.extend((0..100).map(|_| rng.gen_range(0..regression.len())));
    worst = worst.max(check_fd("total/regression", &regression, &grads.regression, &reg_picks, h, 1e-4, |v| {
        inputs(&motion, &fusion, &heatmap, v)
    })?);

    let (checked, kinks, e2e) = end_to_end_gradient(&mut ChaCha8Rng::seed_from_u64(11))?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1} s");
    Ok(format!(
        "loss terms max rel err {worst:.1e}; end to end {checked} parameters ({kinks} steps reduced at kinks), max rel err {e2e:.1e}"
    ))
}

fn gradient_scene(rng: &mut ChaCha8Rng, n_scans: usize, m: usize) -> (Vec<Scan>, Vec<PointClass>, Vec<InstancePrediction>) {
    let car = InstancePrediction::new(InstanceClass::Car, [3.0, 2.0, 0.75], [4.0, 1.8, 1.5], 0.3);
    let scans: Vec<Scan> = (0..n_scans)
        .map(|j| {
            let shift = -0.5 * j as f64;
            let pts = (0..m)
                .map(|_| {
                    LidarPoint::new(
                        rng.gen_range(-6.0..6.0) + shift,
                        rng.gen_range(-6.0..6.0),
                        rng.gen_range(-1.0..2.0),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect();
            Scan::new(pts, None).unwrap()
        })
        .collect();
    let labels = scans[0]
        .points
        .iter()
        .map(|p| {
            if car.contains(p.position) {
                PointClass::Moving
            } else if p.position[2] > 1.8 {
                PointClass::Unlabeled
            } else {
                PointClass::Static
            }
        })
        .collect();
    (scans, labels, vec![car])
}

fn end_to_end_gradient(rng: &mut ChaCha8Rng) -> Result<(usize, usize, f64), String> {
    let cfg = NetworkConfig::toy();
    let q = QuantizationConfig {
        delta_s: 0.4,
        delta_t: 0.1,
        n_scans: 2,
    };
    let (scans, labels, boxes) = gradient_scene(rng, 2, 40);
    let frame = prepare_frame(&scans, &q).unwrap();
    let mut params: Params<f64> = init_params(&cfg);
    for p in &mut params.instance.bev {
        p.bias.iter_mut().for_each(|b| *b = rng.gen_range(0.05..0.2));
    }
    let loss = LossConfig::default();
    let decode = DecodeConfig::default();
    let targets = FrameTargets {
        labels: &labels,
        boxes: &boxes,
    };
    let (_, grads, _) = forward_backward(&params, &cfg, &decode, &loss, &frame, &targets, Some(&boxes)).unwrap();
    let flat = params.to_flat();
    let g = grads.to_flat();
    let mut picks = Vec::new();
    let mut pos = 0;
    params.visit(&mut |_, _, v| {
        picks.push(pos + v.len() - 1);
        pos += v.len();
    });
    picks.extend((0..flat.len().div_ceil(100)).map(|_| rng.gen_range(0..flat.len())));
    let fd = |p: &mut Params<f64>, k: usize, h: f64| {
        let mut v = flat.clone();
        v[k] += h;
        p.load_flat(&v);
        let fp = frame_loss(p, &cfg, &decode, &loss, &frame, &targets, Some(&boxes)).unwrap().l_total;
        v[k] -= 2.0 * h;
        p.load_flat(&v);
        let fm = frame_loss(p, &cfg, &decode, &loss, &frame, &targets, Some(&boxes)).unwrap().l_total;
        (fp - fm) / (2.0 * h)
    };
    let results: Vec<(usize, usize, Option<f64>)> = picks
        .par_iter()
        .map_init(
            || params.clone(),
            |p, &k| {
                // Step down while the interval straddles an activation kink,
                // seen as disagreement between the h and h/2 estimates.
                let mut reduced = 0;
                for h in [1e-5, 1e-6, 1e-7] {
                    let (a, b) = (fd(p, k, h), fd(p, k, h / 2.0));
                    if rel_err(a, b, 1e-5) < 1e-3 {
                        return (k, reduced, Some(b));
                    }
                    reduced += 1;
                }
                (k, reduced, None)
            },
        )
        .collect();
    let mut worst = 0.0f64;
    let mut refined = 0;
    for (k, reduced, estimate) in results {
        refined += reduced;
        let Some(est) = estimate else {
            return Err(format!("parameter {k}: no smooth finite-difference interval"));
        };
        let err = rel_err(est, g[k], 1e-5);
        ensure!(err < 1e-3, "parameter {k}: finite difference {est:e}, analytic {:e}", g[k]);
        worst = worst.max(err);
    }
    Ok((picks.len(), refined, worst))
}

// ---------------------------------------------------------------------------
// Refinement reference

struct RefFrame {
    boxes: Vec<InstancePrediction>,
    flags: Vec<bool>,
    pose: Option<Pose>,
}

fn ref_in_box(p: [f64; 3], b: &InstancePrediction) -> bool {
    let (dx, dy, dz) = (p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]);
    let (s, c) = b.yaw.sin_cos();
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    lx.abs() <= b.size[0] / 2.0 && ly.abs() <= b.size[1] / 2.0 && dz.abs() <= b.size[2] / 2.0
}

fn ref_match(centers: &[[f64; 3]], cur: &[InstancePrediction], past: &[InstancePrediction], cfg: &RefinementConfig) -> Vec<Option<usize>> {
    let ok = |i: usize, k: usize| -> Option<f64> {
        let (a, b) = (&cur[i], &past[k]);
        let d = (0..3).map(|ax| (centers[i][ax] - b.center[ax]).powi(2)).sum::<f64>().sqrt();
        let ratios = (0..3).all(|ax| {
            let r = a.size[ax].max(b.size[ax]) / a.size[ax].min(b.size[ax]);
            r <= cfg.size_ratio_max
        });
        (d <= cfg.match_radius && ratios).then_some(d)
    };
    let mut out = vec![None; cur.len()];
    let mut taken = vec![false; past.len()];
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..cur.len() {
            if out[i].is_some() {
                continue;
            }
            for k in 0..past.len() {
                if taken[k] {
                    continue;
                }
                if let Some(d) = ok(i, k) {
                    if best.map_or(true, |(bd, bi, bk)| (d, i, k) < (bd, bi, bk)) {
                        best = Some((d, i, k));
                    }
                }
            }
        }
        let Some((_, i, k)) = best else { break };
        out[i] = Some(k);
        taken[k] = true;
    }
    out
}

/// Line-by-line reference of the refinement rules. `history` is most recent first.
fn reference_refine(
    labels: &[PointClass],
    conf: &[f64],
    boxes: &[InstancePrediction],
    points: &[[f64; 3]],
    pose: Option<&Pose>,
    history: &[RefFrame],
    cfg: &RefinementConfig,
) -> (Vec<PointClass>, Vec<bool>) {
    let n = boxes.len();
    let mut out = labels.to_vec();
    let mut i0 = vec![false; n];
    let mut m = vec![false; n];
    let mut mc = 0usize;
    let idx: Vec<Vec<usize>> = boxes
        .iter()
        .map(|b| (0..points.len()).filter(|&p| ref_in_box(points[p], b)).collect())
        .collect();
    for i in 0..n {
        let total = idx[i].len() as f64;
        let moving = idx[i].iter().filter(|&&p| labels[p] == PointClass::Moving).count() as f64;
        let ratio = if total > 0.0 { moving / total } else { 0.0 };
        if ratio > cfg.alpha0 {
            i0[i] = true;
        }
        if boxes[i].class == InstanceClass::Car {
            if ratio > cfg.alpha1 {
                mc += 1;
            }
            let confident = idx[i].iter().filter(|&&p| conf[p] > cfg.beta0).count() as f64;
            let share = if total > 0.0 { confident / total } else { 0.0 };
            if share > 0.5 {
                m[i] = true;
            }
        }
    }
    for i in 0..n {
        if mc > cfg.beta1 && m[i] {
            i0[i] = true;
        }
    }
    let mut q = vec![0usize; n];
    for j in 1..=cfg.theta0.min(history.len()) {
        let mut chain = vec![pose];
        chain.extend(history[..j - 1].iter().map(|h| h.pose.as_ref()));
        if chain.iter().any(|p| p.is_none()) {
            continue;
        }
        let t: Matrix4<f64> = chain.iter().fold(Matrix4::identity(), |acc, p| acc * p.unwrap().matrix());
        let inv = t.try_inverse().unwrap();
        let centers: Vec<[f64; 3]> = boxes
            .iter()
            .map(|b| {
                let v = inv * Vector4::new(b.center[0], b.center[1], b.center[2], 1.0);
                [v[0], v[1], v[2]]
            })
            .collect();
        let past = &history[j - 1];
        for (i, k) in ref_match(&centers, boxes, &past.boxes, cfg).into_iter().enumerate() {
            if let Some(k) = k {
                if past.flags[k] {
                    q[i] += 1;
                }
            }
        }
    }
    for i in 0..n {
        if q[i] > cfg.theta1 {
            i0[i] = true;
        }
    }
    for i in 0..n {
        if i0[i] {
            for &p in &idx[i] {
                out[p] = PointClass::Moving;
            }
        }
    }
    (out, i0)
}

struct CaseFrame {
    points: Vec<[f64; 3]>,
    labels: Vec<PointClass>,
    conf: Vec<f64>,
    boxes: Vec<InstancePrediction>,
    pose: Option<Pose>,
}

struct Case {
    frames: Vec<CaseFrame>,
    cfg: RefinementConfig,
}

fn random_case(rng: &mut ChaCha8Rng, max_frames: usize, max_boxes: usize, max_points: usize) -> Case {
    let cfg = RefinementConfig {
        alpha0: *[0.3, 0.5, 0.6, 0.7].choose(rng).unwrap(),
        alpha1: *[0.2, 0.3, 0.5].choose(rng).unwrap(),
        beta0: *[1e-5, 0.3, 0.5, 0.9].choose(rng).unwrap(),
        beta1: rng.gen_range(0..=2),
        theta0: rng.gen_range(1..=max_frames.max(2) - 1),
        theta1: rng.gen_range(0..=2),
        match_radius: *[0.3, 1.0, 2.5].choose(rng).unwrap(),
        size_ratio_max: *[1.2, 1.5, 3.0].choose(rng).unwrap(),
    };
    let n_objects = rng.gen_range(0..=max_boxes);
    let objects: Vec<(InstanceClass, [f64; 3], [f64; 3])> = (0..n_objects)
        .map(|_| {
            let class = if rng.gen_bool(0.6) {
                InstanceClass::Car
            } else {
                *InstanceClass::ALL.choose(rng).unwrap()
            };
            let c = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-0.5..0.5)];
            let s = [rng.gen_range(0.6..3.0), rng.gen_range(0.6..2.0), rng.gen_range(0.8..2.0)];
            (class, c, s)
        })
        .collect();
    let mut world_from_frame = Pose::identity();
    let n_frames = rng.gen_range(1..=max_frames);
    let mut frames = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let link = Pose::from_yaw_translation(
            rng.gen_range(-0.3..0.3),
            [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.1..0.1)],
        );
        if f > 0 {
            world_from_frame = world_from_frame.compose(&link.inverse());
        }
        let pose = (f > 0 && !rng.gen_bool(0.15)).then_some(link);
        let frame_from_world = world_from_frame.inverse();
        let mut boxes = Vec::new();
        for (class, c, s) in &objects {
            if rng.gen_bool(0.15) {
                continue;
            }
            let jitter = if rng.gen_bool(0.8) { 0.2 } else { 1.5 };
            let wc = [
                c[0] + rng.gen_range(-jitter..jitter),
                c[1] + rng.gen_range(-jitter..jitter),
                c[2],
            ];
            let grow = if rng.gen_bool(0.85) { rng.gen_range(0.85..1.15) } else { 2.0 };
            let size = [s[0] * grow, s[1], s[2]];
            let mut b = InstancePrediction::new(*class, frame_from_world.transform_point(wc), size, rng.gen_range(-3.0..3.0));
            b.score = rng.gen_range(0.1..1.0);
            boxes.push(b);
        }
        boxes.shuffle(rng);
        let n_points = rng.gen_range(0..=max_points);
        let mut points = Vec::with_capacity(n_points);
        let mut labels = Vec::with_capacity(n_points);
        let mut conf = Vec::with_capacity(n_points);
        let moving_share: Vec<f64> = boxes.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
        for _ in 0..n_points {
            let inside = !boxes.is_empty() && rng.gen_bool(0.7);
            let (p, share) = if inside {
                let k = rng.gen_range(0..boxes.len());
                let b = &boxes[k];
                let l = [
                    rng.gen_range(-0.5..0.5) * b.size[0],
                    rng.gen_range(-0.5..0.5) * b.size[1],
                    rng.gen_range(-0.5..0.5) * b.size[2],
                ];
                let (s, c) = b.yaw.sin_cos();
                let p = [
                    b.center[0] + c * l[0] - s * l[1],
                    b.center[1] + s * l[0] + c * l[1],
                    b.center[2] + l[2],
                ];
                (p, moving_share[k])
            } else {
                let p = [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), rng.gen_range(-1.5..1.5)];
                (p, 0.3)
            };
            points.push(p);
            labels.push(if rng.gen_bool(share) {
                PointClass::Moving
            } else if rng.gen_bool(0.8) {
                PointClass::Static
            } else {
                PointClass::Unlabeled
            });
            conf.push(match rng.gen_range(0..4) {
                0 => 0.0,
                1 => cfg.beta0,
                2 => 0.95,
                _ => rng.gen_range(0.0..1.0),
            });
        }
        frames.push(CaseFrame {
            points,
            labels,
            conf,
            boxes,
            pose,
        });
    }
    Case { frames, cfg }
}

fn to_scan(points: &[[f64; 3]]) -> Scan {
    Scan::new(points.iter().map(|p| LidarPoint::new(p[0], p[1], p[2], 0.0)).collect(), None).unwrap()
}

/// Runs both implementations over a case; returns the first mismatch.
fn compare_case(case: &Case) -> Result<Vec<(Vec<PointClass>, Vec<PointClass>, Vec<[f64; 3]>, Vec<InstancePrediction>)>, String> {
    let mut state = RefinementState::new();
    let mut history: Vec<RefFrame> = Vec::new();
    let mut outputs = Vec::new();
    for (f, fr) in case.frames.iter().enumerate() {
        let predicted = MovingLabels {
            labels: fr.labels.clone(),
            moving_confidence: fr.conf.clone(),
        };
        let scan = to_scan(&fr.points);
        let got = refine(&predicted, &fr.boxes, &scan, fr.pose.as_ref(), &mut state, &case.cfg).map_err(|e| e.to_string())?;
        let (labels, flags) = reference_refine(&fr.labels, &fr.conf, &fr.boxes, &fr.points, fr.pose.as_ref(), &history, &case.cfg);
        ensure!(got.labels == labels, "frame {f}: labels differ");
        ensure!(got.moving_flags == flags, "frame {f}: flags {:?}, reference {flags:?}", got.moving_flags);
        history.insert(
            0,
            RefFrame {
                boxes: fr.boxes.clone(),
                flags,
                pose: fr.pose,
            },
        );
        history.truncate(case.cfg.theta0);
        outputs.push((fr.labels.clone(), got.labels, fr.points.clone(), fr.boxes.clone()));
    }
    Ok(outputs)
}

fn run_refinement(labels: &[PointClass], conf: &[f64], boxes: &[InstancePrediction], points: &[[f64; 3]], state: &mut RefinementState, cfg: &RefinementConfig) -> (Vec<PointClass>, Vec<bool>) {
    let predicted = MovingLabels {
        labels: labels.to_vec(),
        moving_confidence: conf.to_vec(),
    };
    let out = refine(&predicted, boxes, &to_scan(points), Some(&Pose::identity()), state, cfg).unwrap();
    (out.labels, out.moving_flags)
}

fn grid_points(center: [f64; 2], n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|k| [center[0] - 0.9 + 0.2 * k as f64, center[1], 0.0]).collect()
}

fn hand_cases() -> Result<(), String> {
    use PointClass::*;
    let cfg = RefinementConfig::default();
    let ped = InstancePrediction::new(InstanceClass::Pedestrian, [0.0, 0.0, 0.0], [2.2, 1.0, 1.0], 0.0);
    let mut pts = grid_points([0.0, 0.0], 10);
    pts.push([5.0, 5.0, 0.0]);
    for (moving, expect_all) in [(7, true), (6, false)] {
        let mut labels: Vec<PointClass> = (0..10).map(|k| if k < moving { Moving } else { Static }).collect();
        labels.push(Static);
        let (out, flags) = run_refinement(&labels, &[0.0; 11], &[ped], &pts, &mut RefinementState::new(), &cfg);
        ensure!(flags == vec![expect_all], "{moving}/10 moving: flag {:?}", flags);
        let want: Vec<PointClass> = if expect_all {
            (0..10).map(|_| Moving).chain([Static]).collect()
        } else {
            labels.clone()
        };
        ensure!(out == want, "{moving}/10 moving: labels {out:?}");
    }

    // Six cars at 0.4 make the scene dynamic; a seventh at 0.1 with 60% confident points follows.
    let mut boxes = Vec::new();
    let (mut points, mut labels, mut conf) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..7 {
        let x = 4.0 * c as f64;
        boxes.push(InstancePrediction::new(InstanceClass::Car, [x, 0.0, 0.0], [2.2, 1.0, 1.0], 0.0));
        points.extend(grid_points([x, 0.0], 10));
        for k in 0..10 {
            let (moving, confident) = if c < 6 { (k < 4, k < 4) } else { (k < 1, k < 6) };
            labels.push(if moving { Moving } else { Static });
            conf.push(if confident { 0.3 } else { 0.0 });
        }
    }
    let (out, flags) = run_refinement(&labels, &conf, &boxes, &points, &mut RefinementState::new(), &cfg);
    ensure!(flags == [false, false, false, false, false, false, true], "dynamic scene flags {flags:?}");
    ensure!(out[60..].iter().all(|&l| l == Moving), "seventh car not set moving");
    ensure!(out[..60] == labels[..60], "other cars changed");

    // Persistence over five past frames under identity poses.
    for (past_moving, expect) in [(4, true), (3, false)] {
        let car = InstancePrediction::new(InstanceClass::Car, [0.0, 0.0, 0.0], [2.2, 1.0, 1.0], 0.0);
        let pts = grid_points([0.0, 0.0], 10);
        let mut state = RefinementState::new();
        for f in 0..5 {
            let l = if f < past_moving { Moving } else { Static };
            run_refinement(&[l; 10], &[0.0; 10], &[car], &pts, &mut state, &cfg);
        }
        let (out, flags) = run_refinement(&[Static; 10], &[0.0; 10], &[car], &pts, &mut state, &cfg);
        ensure!(flags == vec![expect], "{past_moving} of 5 past frames moving: flag {flags:?}");
        ensure!(out.iter().all(|&l| (l == Moving) == expect), "{past_moving} of 5 past frames moving: labels");
    }
    Ok(())
}

fn refinement_oracle() -> Outcome {
    hand_cases()?;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cases = 1500;
    let mut frames = 0;
    let mut promoted = 0;
    for k in 0..cases {
        let case = random_case(&mut rng, 3, 3, 20);
        let out = compare_case(&case).map_err(|e| format!("case {k}: {e}"))?;
        frames += out.len();
        promoted += out.iter().filter(|(a, b, _, _)| a != b).count();
    }
    Ok(format!("4 hand cases, {cases} random sequences ({frames} frames, {promoted} with promotions) identical"))
}

fn refinement_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut checked = 0usize;
    for (cases, frames, boxes, points) in [(1500, 3, 3, 20), (300, 7, 10, 200)] {
        for k in 0..cases {
            let case = random_case(&mut rng, frames, boxes, points);
            for (f, (before, after, pts, bxs)) in compare_case(&case)?.into_iter().enumerate() {
                for p in 0..before.len() {
                    let inside = bxs.iter().any(|b| ref_in_box(pts[p], b));
                    ensure!(
                        before[p] != PointClass::Moving || after[p] == PointClass::Moving,
                        "case {k} frame {f} point {p}: moving point demoted"
                    );
                    ensure!(
                        after[p] == before[p] || (inside && after[p] == PointClass::Moving),
                        "case {k} frame {f} point {p}: {:?} became {:?}",
                        before[p],
                        after[p]
                    );
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} frames: no demotions, changes only inside boxes"))
}

// ---------------------------------------------------------------------------
// Metrics

fn metric_suite() -> Outcome {
    use PointClass::*;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let cases = 3000;
    let mut totals = ConfusionCounts::default();
    let (mut tp_all, mut fp_all, mut fn_all) = (0u64, 0u64, 0u64);
    for k in 0..cases {
        let n = rng.gen_range(0..200);
        let pred = random_labels(&mut rng, n);
        let gt = random_labels(&mut rng, n);
        let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
        for i in 0..n {
            if gt[i] == Unlabeled {
                continue;
            }
            match (pred[i] == Moving, gt[i] == Moving) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                _ => {}
            }
        }
        let c = confusion(&pred, &gt).unwrap();
        ensure!((c.tp, c.fp, c.fn_) == (tp, fp, fne), "case {k}: counts {c:?}, expected {tp}/{fp}/{fne}");
        let want = if tp + fp + fne == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp + fne) as f64
        };
        ensure!(iou(&c) == want, "case {k}: iou {}, expected {want}", iou(&c));
        totals.tp += c.tp;
        totals.fp += c.fp;
        totals.fn_ += c.fn_;
        tp_all += tp;
        fp_all += fp;
        fn_all += fne;
    }
    ensure!(
        iou(&totals) == tp_all as f64 / (tp_all + fp_all + fn_all) as f64,
        "aggregated iou differs"
    );
    let c = confusion(&[Moving, Moving], &[Unlabeled, Unlabeled]).unwrap();
    ensure!(c.fp == 0 && iou(&c) == 1.0, "unlabeled ground truth counted: {c:?}");
    ensure!(iou(&confusion(&[Static], &[Static]).unwrap()) == 1.0, "empty union is not 1");
    ensure!(iou(&confusion(&[], &[]).unwrap()) == 1.0, "empty frame is not 1");
    ensure!(confusion(&[Moving], &[]).is_err(), "length mismatch accepted");
    Ok(format!("{cases} random frames, unlabeled exclusion and empty union"))
}

// ---------------------------------------------------------------------------
// Geometry

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let axis = nalgebra::Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let rot = nalgebra::Rotation3::from_scaled_axis(axis.normalize() * rng.gen_range(-3.1..3.1));
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
    for k in 0..3 {
        m[(k, 3)] = rng.gen_range(-100.0..100.0);
    }
    Pose::from_matrix(m).unwrap()
}

fn geometry_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut assoc, mut round) = (0.0f64, 0.0f64);
    for _ in 0..2000 {
        let (a, b, c) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
        assoc = assoc.max(a.compose(&b).compose(&c).max_abs_diff(&a.compose(&b.compose(&c))));
        round = round.max(a.compose(&a.inverse()).max_abs_diff(&Pose::identity()));
        round = round.max(a.inverse().compose(&a).max_abs_diff(&Pose::identity()));
        let chain = compose_poses(&[a, b, c]).unwrap();
        ensure!(chain.max_abs_diff(&a.compose(&b).compose(&c)) < 1e-9, "compose_poses differs from the chain");
    }
    ensure!(assoc < 1e-9, "associativity error {assoc:e}");
    ensure!(round < 1e-6, "inverse round trip error {round:e}");

    let q = QuantizationConfig {
        delta_s: 0.1,
        delta_t: 0.1,
        n_scans: 10,
    };
    let fixed = [
        ([-0.3, 0.3, -0.05], 0.0, [-3, 3, -1, 0]),
        ([-0.1, 0.1, 0.0], -0.7, [-1, 1, 0, -7]),
        ([0.7, -0.7, 1.0], -0.3, [7, -7, 10, -3]),
    ];
    for (p, t, want) in fixed {
        let v = quantize(&[TimedPoint { position: p, t }], &q).unwrap();
        ensure!(v.coords[0].to_array() == want, "{p:?} at t={t}: {:?}, expected {want:?}", v.coords[0]);
    }
    let mut points = Vec::new();
    for _ in 0..20000 {
        let scale = *[0.5, 5.0, 50.0].choose(&mut rng).unwrap();
        let p = [rng.gen_range(-scale..scale), rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)];
        points.push(TimedPoint {
            position: p,
            t: -(rng.gen_range(0..10) as f64) * 0.1,
        });
    }
    let v = quantize(&points, &q).unwrap();
    for (i, p) in points.iter().enumerate() {
        let c = v.point_coord(i).unwrap().to_array();
        let vals = [p.position[0], p.position[1], p.position[2], p.t];
        for ax in 0..4 {
            let (lo, hi) = (c[ax] as f64 * 0.1, (c[ax] + 1) as f64 * 0.1);
            let slack = 1e-9 * 0.1 + 1e-12 * vals[ax].abs();
            ensure!(
                lo - slack <= vals[ax] && vals[ax] < hi + slack,
                "point {i} axis {ax}: value {} outside cell {} ({lo}, {hi})",
                vals[ax],
                c[ax]
            );
        }
    }
    let distinct: HashSet<Coord4> = (0..points.len()).map(|i| v.point_coord(i).unwrap()).collect();
    ensure!(distinct.len() == v.coords.len(), "voxel list is not the distinct cell set");
    Ok(format!(
        "associativity {assoc:.1e}, inverse round trip {round:.1e}, {} points binned",
        points.len()
    ))
}

// ---------------------------------------------------------------------------
// Toy training

fn toy_training() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::toy();
    let scenes: Vec<_> = (0..50)
        .map(|seed| generate_scene(&SceneSpec { seed, ..SceneSpec::default() }).unwrap())
        .collect();
    let frames = training_frames(&scenes, &cfg).unwrap();
    let probe = probe_frames(&frames, 20);
    let untrained: Params<f32> = init_params(&cfg.network);
    let mut params = untrained.clone();
    let before = mean_loss(&params, &cfg, &probe).unwrap().l_total;
    ensure!(cfg.training.steps == 300, "toy configuration trains {} steps", cfg.training.steps);
    train_toy(&mut params, &cfg, &frames, |_| {}).map_err(|e| e.to_string())?;
    let after = mean_loss(&params, &cfg, &probe).unwrap().l_total;
    let ratio = after / before;

    let held_out: Vec<_> = (1000..1010)
        .map(|seed| generate_scene(&SceneSpec { seed, ..SceneSpec::default() }).unwrap())
        .collect();
    let report = |p: &Params<f32>| -> SequenceReport {
        let per: Vec<SequenceReport> = held_out.iter().map(|s| evaluate_sequence(p, &cfg, s).unwrap()).collect();
        SequenceReport::merge(&per)
    };
    let trained = report(&params);
    let baseline = report(&untrained);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "loss {before:.3} -> {after:.3} (ratio {ratio:.3}), held-out IoU {:.3} (raw {:.3}) vs untrained {:.3}",
        trained.iou, trained.raw_iou, baseline.iou
    );
    ensure!(ratio <= 0.5, "{detail}");
    ensure!(trained.iou > baseline.iou && trained.iou > 0.0, "{detail}");
    ensure!(trained.iou >= 0.6, "{detail}");
    ensure!(secs < 600.0, "{detail}; took {secs:.0} s");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// Refinement latency

fn refinement_latency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let cfg = RefinementConfig {
        theta0: 5,
        ..RefinementConfig::default()
    };
    let n = 100_000;
    let boxes: Vec<InstancePrediction> = (0..50)
        .map(|k| {
            let class = InstanceClass::ALL[k % 3];
            let c = [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), 0.0];
            InstancePrediction::new(class, c, [4.0, 1.8, 1.6], rng.gen_range(-3.0..3.0))
        })
        .collect();
    let points: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-2.0..3.0)])
        .collect();
    let labels = random_labels(&mut rng, n);
    let conf: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let predicted = MovingLabels {
        labels,
        moving_confidence: conf,
    };
    let scan = to_scan(&points);
    let link = Pose::from_yaw_translation(0.01, [0.5, 0.0, 0.0]);
    let mut state = RefinementState::new();
    for _ in 0..5 {
        refine(&predicted, &boxes, &scan, Some(&link), &mut state, &cfg).unwrap();
    }
    ensure!(state.len() == 5, "history holds {} frames", state.len());
    let mut times = Vec::new();
    for _ in 0..7 {
        let mut s = state.clone();
        let t = Instant::now();
        refine(&predicted, &boxes, &scan, Some(&link), &mut s, &cfg).unwrap();
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let first = times[0];
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    ensure!(median < 100.0, "median {median:.1} ms");
    Ok(format!("median {median:.1} ms, first {first:.1} ms, max {:.1} ms", times[times.len() - 1]))
}

// ---------------------------------------------------------------------------
// File formats

fn io_suite() -> Outcome {
    use PointClass::*;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mapping = LabelMapping::default();

    let pts: Vec<LidarPoint> = (0..257)
        .map(|_| {
            let f = |r: &mut ChaCha8Rng, s: f32| r.gen_range(-s..s) as f64;
            LidarPoint::new(f(&mut rng, 80.0), f(&mut rng, 80.0), f(&mut rng, 5.0), f(&mut rng, 1.0).abs())
        })
        .collect();
    let scan = Scan::new(pts, None).unwrap();
    let path = dir.path().join("000000.bin");
    dataio::write_scan(&path, &scan).unwrap();
    let back = dataio::read_scan(&path).unwrap();
    ensure!(back.points == scan.points, "scan round trip changed points");
    let bytes = dataio::encode_scan(&scan);
    for len in 0..bytes.len() {
        let r = dataio::decode_scan(&path, &bytes[..len]);
        match (len % 16, r) {
            (0, Ok(s)) => ensure!(s.len() == len / 16, "prefix {len}: {} points", s.len()),
            (0, Err(e)) => return Err(format!("prefix {len} rejected: {e}")),
            (_, Ok(_)) => return Err(format!("truncated scan of {len} bytes accepted")),
            (_, Err(insmos::Error::Malformed { position, .. })) => {
                ensure!(position == format!("byte {}", len - len % 16), "prefix {len}: position {position}")
            }
            (_, Err(e)) => return Err(format!("prefix {len}: unexpected error {e}")),
        }
    }

    let labels: Vec<PointClass> = random_labels(&mut rng, 300);
    let lpath = dir.path().join("000000.label");
    dataio::write_labels(&lpath, &labels, &mapping).unwrap();
    ensure!(dataio::read_labels(&lpath, &mapping).unwrap() == labels, "label round trip");
    let raw = std::fs::read(&lpath).unwrap();
    for cut in [1, 2, 3, 5, raw.len() - 1] {
        std::fs::write(&lpath, &raw[..cut]).unwrap();
        match dataio::read_labels(&lpath, &mapping) {
            Err(insmos::Error::Malformed { position, .. }) => {
                ensure!(position == format!("byte {}", cut - cut % 4), "label prefix {cut}: position {position}")
            }
            other => return Err(format!("label prefix {cut}: {other:?}")),
        }
    }

    let conf: Vec<f64> = (0..labels.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let predicted = MovingLabels {
        labels: labels.clone(),
        moving_confidence: conf.clone(),
    };
    let ppath = dir.path().join("pred.label");
    dataio::write_predictions(&ppath, &predicted, &mapping).unwrap();
    let words = dataio::read_label_words(&ppath).unwrap();
    let want: Vec<u32> = labels
        .iter()
        .map(|l| match l {
            Unlabeled => 0,
            Static => 9,
            Moving => 251,
        })
        .collect();
    ensure!(words == want, "prediction words differ");
    let cpath = dir.path().join("pred.conf");
    dataio::write_confidences(&cpath, &conf).unwrap();
    let cback = dataio::read_confidences(&cpath).unwrap();
    ensure!(
        cback.iter().zip(&conf).all(|(a, b)| (a - b).abs() < 1e-7),
        "confidence round trip"
    );

    let mut boxes: FrameBoxes = BTreeMap::new();
    for f in 0..5 {
        let list = (0..rng.gen_range(0..4))
            .map(|_| {
                let mut b = InstancePrediction::new(
                    *InstanceClass::ALL.choose(&mut rng).unwrap(),
                    [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), rng.gen_range(-2.0..2.0)],
                    [rng.gen_range(0.3..5.0), rng.gen_range(0.3..3.0), rng.gen_range(0.5..2.5)],
                    rng.gen_range(-3.1..3.1),
                );
                if rng.gen_bool(0.5) {
                    b.score = rng.gen_range(0.0..1.0);
                }
                b
            })
            .collect::<Vec<_>>();
        if !list.is_empty() {
            boxes.insert(f, list);
        }
    }
    let bpath = dir.path().join("boxes.txt");
    dataio::write_boxes(&bpath, &boxes).unwrap();
    let parsed = dataio::read_boxes(&bpath).unwrap();
    ensure!(dataio::format_boxes(&parsed) == dataio::format_boxes(&boxes), "box text is not stable");
    for (f, list) in &boxes {
        for (a, b) in list.iter().zip(&parsed[f]) {
            let close = a.class == b.class
                && (0..3).all(|k| (a.center[k] - b.center[k]).abs() < 1e-6 && (a.size[k] - b.size[k]).abs() < 1e-6)
                && (a.yaw - b.yaw).abs() < 1e-6
                && (a.score - b.score).abs() < 1e-6;
            ensure!(close, "frame {f}: {a:?} read back as {b:?}");
        }
    }
    let bad = dataio::parse_boxes(&bpath, "0 Car 1 2 3 4 5 6\n");
    ensure!(matches!(bad, Err(insmos::Error::Malformed { .. })), "short box line accepted");
    let bad = dataio::parse_boxes(&bpath, "0 Truck 1 2 3 4 5 6 0\n");
    ensure!(matches!(bad, Err(insmos::Error::UnknownClass { .. })), "unknown class accepted");

    let poses: Vec<Pose> = (0..6).map(|_| random_pose(&mut rng)).collect();
    let pose_path = dir.path().join("poses.txt");
    dataio::write_camera_poses(&pose_path, &poses).unwrap();
    let pback = dataio::read_camera_poses(&pose_path).unwrap();
    ensure!(
        pback.iter().zip(&poses).all(|(a, b)| a.max_abs_diff(b) == 0.0),
        "pose text round trip is not exact"
    );
    Ok("scan, label, prediction, confidence, box and pose files".into())
}
