//! Python bindings: poses, quantization, boxes, file formats, the forward
//! pipeline, refinement and the IoU metric.
//!
//! Points cross the boundary as lists of `(x, y, z, intensity)` tuples and
//! labels as integers `0` unlabeled, `1` static, `2` moving.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use insmos::config::ModelConfig;
use insmos::dataio::{self, LabelMapping};
use insmos::geometry::{self, LidarPoint, PointClass, QuantizationConfig, Scan, TimedPoint};
use insmos::harness::{self, SceneSpec};
use insmos::instances::{InstanceClass, InstancePrediction};
use insmos::network::{self, Checkpoint, MovingLabels, Params};
use insmos::refinement::{self, RefinementState};
use insmos::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NumericalFailure { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Point = (f64, f64, f64, f64);

fn scan_from(points: Vec<Point>) -> PyResult<Scan> {
    let pts = points.into_iter().map(|(x, y, z, i)| LidarPoint::new(x, y, z, i)).collect();
    Scan::new(pts, None).map_err(to_py)
}

fn points_of(scan: &Scan) -> Vec<Point> {
    scan.points
        .iter()
        .map(|p| (p.position[0], p.position[1], p.position[2], p.intensity))
        .collect()
}

fn classes_from(labels: &[u32]) -> PyResult<Vec<PointClass>> {
    labels
        .iter()
        .map(|&l| {
            PointClass::from_index(l as usize).ok_or_else(|| PyValueError::new_err(format!("label {l} is not 0, 1 or 2")))
        })
        .collect()
}

fn class_ids(labels: &[PointClass]) -> Vec<u32> {
    labels.iter().map(|l| l.index() as u32).collect()
}

/// Rigid transform in homogeneous coordinates.
#[pyclass(name = "Pose", from_py_object)]
#[derive(Clone, Copy)]
struct PyPose(geometry::Pose);

#[pymethods]
impl PyPose {
    /// From a 4×4 row-major nested list.
    #[new]
    fn new(matrix: [[f64; 4]; 4]) -> PyResult<Self> {
        if matrix[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(PyValueError::new_err("last row must be [0, 0, 0, 1]"));
        }
        let rows: [f64; 12] = std::array::from_fn(|k| matrix[k / 4][k % 4]);
        geometry::Pose::from_3x4(&rows).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn identity() -> Self {
        Self(geometry::Pose::identity())
    }

    #[staticmethod]
    fn translation(x: f64, y: f64, z: f64) -> Self {
        Self(geometry::Pose::translation(x, y, z))
    }

    #[staticmethod]
    fn rot_z(angle: f64) -> Self {
        Self(geometry::Pose::rot_z(angle))
    }

    fn compose(&self, other: &PyPose) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn matrix(&self) -> [[f64; 4]; 4] {
        let m = self.0.to_3x4();
        std::array::from_fn(|r| if r < 3 { std::array::from_fn(|c| m[4 * r + c]) } else { [0.0, 0.0, 0.0, 1.0] })
    }

    fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        self.0.transform_point(p)
    }

    fn __repr__(&self) -> String {
        format!("Pose({:?})", self.matrix())
    }
}

/// Product `relatives[0] · relatives[1] · …`.
#[pyfunction]
fn compose_poses(relatives: Vec<PyPose>) -> PyResult<PyPose> {
    let poses: Vec<_> = relatives.into_iter().map(|p| p.0).collect();
    geometry::compose_poses(&poses).map(PyPose).map_err(to_py)
}

/// 4D cell `(i, j, k, t)` of every `(x, y, z, t)` point; `None` for
/// non-finite points.
#[pyfunction]
#[pyo3(signature = (points, delta_s, delta_t, n_scans = 1))]
fn quantize(points: Vec<[f64; 4]>, delta_s: f64, delta_t: f64, n_scans: usize) -> PyResult<Vec<Option<[i32; 4]>>> {
    let timed: Vec<TimedPoint> = points
        .iter()
        .map(|p| TimedPoint {
            position: [p[0], p[1], p[2]],
            t: p[3],
        })
        .collect();
    let cfg = QuantizationConfig {
        delta_s,
        delta_t,
        n_scans,
    };
    let vox = geometry::quantize(&timed, &cfg).map_err(to_py)?;
    Ok((0..timed.len()).map(|i| vox.point_coord(i).map(|c| c.to_array())).collect())
}

/// Oriented box with class name, center, size `(l, m, q)`, yaw and score.
#[pyclass(name = "InstanceBox", from_py_object)]
#[derive(Clone, Copy)]
struct PyBox(InstancePrediction);

#[pymethods]
impl PyBox {
    #[new]
    #[pyo3(signature = (class_name, center, size, yaw, score = 1.0))]
    fn new(class_name: &str, center: [f64; 3], size: [f64; 3], yaw: f64, score: f64) -> PyResult<Self> {
        let class: InstanceClass = class_name.parse().map_err(to_py)?;
        let mut b = InstancePrediction::new(class, center, size, yaw);
        b.score = score;
        b.validate().map_err(to_py)?;
        Ok(Self(b))
    }

    #[getter]
    fn class_name(&self) -> &'static str {
        self.0.class.name()
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.0.center
    }

    #[getter]
    fn size(&self) -> [f64; 3] {
        self.0.size
    }

    #[getter]
    fn yaw(&self) -> f64 {
        self.0.yaw
    }

    #[getter]
    fn score(&self) -> f64 {
        self.0.score
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        self.0.contains(p)
    }

    fn __repr__(&self) -> String {
        format!(
            "InstanceBox({:?}, center={:?}, size={:?}, yaw={}, score={})",
            self.0.class.name(),
            self.0.center,
            self.0.size,
            self.0.yaw,
            self.0.score
        )
    }
}

fn unwrap_boxes(boxes: Vec<PyBox>) -> Vec<InstancePrediction> {
    boxes.into_iter().map(|b| b.0).collect()
}

fn wrap_boxes(boxes: &[InstancePrediction]) -> Vec<PyBox> {
    boxes.iter().copied().map(PyBox).collect()
}

/// Moving-object IoU over frames given as `(predicted, ground_truth)` pairs.
#[pyfunction]
fn moving_iou(frames: Vec<(Vec<u32>, Vec<u32>)>) -> PyResult<f64> {
    let mut total = harness::ConfusionCounts::default();
    for (p, g) in &frames {
        total += harness::confusion(&classes_from(p)?, &classes_from(g)?).map_err(to_py)?;
    }
    Ok(harness::iou(&total))
}

#[pyfunction]
fn read_scan(path: PathBuf) -> PyResult<Vec<Point>> {
    dataio::read_scan(&path).map(|s| points_of(&s)).map_err(to_py)
}

#[pyfunction]
fn write_scan(path: PathBuf, points: Vec<Point>) -> PyResult<()> {
    dataio::write_scan(&path, &scan_from(points)?).map_err(to_py)
}

fn mapping(path: Option<PathBuf>) -> PyResult<LabelMapping> {
    path.map_or_else(|| Ok(LabelMapping::default()), |p| LabelMapping::load(&p))
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (path, mapping_path = None))]
fn read_labels(path: PathBuf, mapping_path: Option<PathBuf>) -> PyResult<Vec<u32>> {
    let m = mapping(mapping_path)?;
    dataio::read_labels(&path, &m).map(|l| class_ids(&l)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (path, labels, mapping_path = None))]
fn write_predictions(path: PathBuf, labels: Vec<u32>, mapping_path: Option<PathBuf>) -> PyResult<()> {
    let m = mapping(mapping_path)?;
    let labels = MovingLabels::from_labels(classes_from(&labels)?);
    dataio::write_predictions(&path, &labels, &m).map_err(to_py)
}

/// Sensor-frame relatives: entry `k - 1` is the pose of scan `k` in scan `k - 1`.
#[pyfunction]
fn read_poses(pose_path: PathBuf, calib_path: PathBuf) -> PyResult<Vec<PyPose>> {
    dataio::read_poses(&pose_path, &calib_path)
        .map(|v| v.into_iter().map(PyPose).collect())
        .map_err(to_py)
}

/// `{frame: [InstanceBox, ...]}`.
#[pyfunction]
fn read_boxes(path: PathBuf) -> PyResult<std::collections::BTreeMap<usize, Vec<PyBox>>> {
    let boxes = dataio::read_boxes(&path).map_err(to_py)?;
    Ok(boxes.into_iter().map(|(f, b)| (f, wrap_boxes(&b))).collect())
}

#[pyfunction]
fn write_boxes(path: PathBuf, boxes: std::collections::BTreeMap<usize, Vec<PyBox>>) -> PyResult<()> {
    let boxes = boxes.into_iter().map(|(f, b)| (f, unwrap_boxes(b))).collect();
    dataio::write_boxes(&path, &boxes).map_err(to_py)
}

/// One frame of a synthetic scene, in its sensor frame.
#[pyclass(name = "SyntheticFrame", get_all)]
struct PyFrame {
    points: Vec<Point>,
    labels: Vec<u32>,
    boxes: Vec<PyBox>,
    /// Pose of the previous frame in this one.
    pose_to_previous: PyPose,
}

#[pyfunction]
#[pyo3(signature = (seed = 0, frames = 8))]
fn synthetic_scene(seed: u64, frames: usize) -> PyResult<Vec<PyFrame>> {
    let scene = harness::generate_scene(&SceneSpec {
        seed,
        n_frames: frames,
        ..SceneSpec::default()
    })
    .map_err(to_py)?;
    Ok((0..scene.len())
        .map(|f| PyFrame {
            points: points_of(&scene.scans[f]),
            labels: class_ids(scene.labels(f)),
            boxes: wrap_boxes(&scene.boxes(f)),
            pose_to_previous: PyPose(scene.pose_to_previous(f)),
        })
        .collect())
}

/// Network parameters with their configuration.
#[pyclass(name = "Model")]
struct PyModel {
    cfg: ModelConfig,
    params: Params<f32>,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized toy model, or the configuration file's model.
    #[new]
    #[pyo3(signature = (config_path = None))]
    fn new(config_path: Option<PathBuf>) -> PyResult<Self> {
        let cfg = match config_path {
            Some(p) => ModelConfig::load(&p).map_err(to_py)?,
            None => ModelConfig::toy(),
        };
        let params = network::init_params(&cfg.network);
        Ok(Self { cfg, params })
    }

    fn load_checkpoint(&mut self, path: PathBuf) -> PyResult<()> {
        let ckpt = Checkpoint::load(&path).map_err(to_py)?;
        if ckpt.config_hash != self.cfg.hash() {
            return Err(PyValueError::new_err("checkpoint was trained with a different configuration"));
        }
        ckpt.load_into(&mut self.params).map_err(to_py)
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_params(&self.params, self.cfg.hash())
            .save(&path)
            .map_err(to_py)
    }

    /// Trains on synthetic scenes with seeds `scene_seed..scene_seed + scenes`
    /// and returns the total loss of every step.
    #[pyo3(signature = (steps, scenes = 50, scene_seed = 0))]
    fn train(&mut self, py: Python<'_>, steps: usize, scenes: u64, scene_seed: u64) -> PyResult<Vec<f64>> {
        let mut cfg = self.cfg.clone();
        cfg.training.steps = steps;
        let params = &mut self.params;
        py.detach(|| {
            let scenes = (scene_seed..scene_seed + scenes)
                .map(|seed| {
                    harness::generate_scene(&SceneSpec {
                        seed,
                        ..SceneSpec::default()
                    })
                })
                .collect::<insmos::Result<Vec<_>>>()?;
            let frames = harness::training_frames(&scenes, &cfg)?;
            harness::train_toy(params, &cfg, &frames, |_| {})
        })
        .map(|curve| curve.iter().map(|r| r.loss.l_total).collect())
        .map_err(to_py)
    }

    /// Labels, moving confidences and boxes for the first scan of `scans`
    /// (current first, then older ones). `relatives[j - 1]` is the pose of
    /// scan `j` in scan `j - 1`.
    fn predict(
        &self,
        py: Python<'_>,
        scans: Vec<Vec<Point>>,
        relatives: Vec<PyPose>,
    ) -> PyResult<(Vec<u32>, Vec<f64>, Vec<PyBox>)> {
        let scans = scans.into_iter().map(scan_from).collect::<PyResult<Vec<_>>>()?;
        let relatives: Vec<_> = relatives.into_iter().map(|p| p.0).collect();
        let out = py
            .detach(|| {
                let aligned = network::align_window(&scans, &relatives)?;
                let input = network::prepare_frame(&aligned, &self.cfg.quantization)?;
                network::pipeline_forward(&self.params, &self.cfg.network, &self.cfg.decode, &input)
            })
            .map_err(to_py)?;
        Ok((
            class_ids(&out.labels.labels),
            out.labels.moving_confidence,
            wrap_boxes(&out.instances),
        ))
    }
}

/// Instance-based refinement with its history of past frames.
#[pyclass(name = "Refiner")]
struct PyRefiner {
    cfg: refinement::RefinementConfig,
    state: RefinementState,
}

#[pymethods]
impl PyRefiner {
    #[new]
    #[pyo3(signature = (alpha0 = 0.6, alpha1 = 0.3, beta0 = 1e-5, beta1 = 5, theta0 = 5, theta1 = 3, match_radius = 1.0, size_ratio_max = 1.5))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        alpha0: f64,
        alpha1: f64,
        beta0: f64,
        beta1: usize,
        theta0: usize,
        theta1: usize,
        match_radius: f64,
        size_ratio_max: f64,
    ) -> PyResult<Self> {
        let cfg = refinement::RefinementConfig {
            alpha0,
            alpha1,
            beta0,
            beta1,
            theta0,
            theta1,
            match_radius,
            size_ratio_max,
        };
        cfg.validate().map_err(to_py)?;
        Ok(Self {
            cfg,
            state: RefinementState::new(),
        })
    }

    /// Refines one frame and returns `(labels, moving_flags)`.
    #[pyo3(signature = (labels, confidence, boxes, points, pose_to_previous = None))]
    fn step(
        &mut self,
        labels: Vec<u32>,
        confidence: Vec<f64>,
        boxes: Vec<PyBox>,
        points: Vec<Point>,
        pose_to_previous: Option<PyPose>,
    ) -> PyResult<(Vec<u32>, Vec<bool>)> {
        let predicted = MovingLabels {
            labels: classes_from(&labels)?,
            moving_confidence: confidence,
        };
        let scan = scan_from(points)?;
        let out = refinement::refine(
            &predicted,
            &unwrap_boxes(boxes),
            &scan,
            pose_to_previous.map(|p| p.0).as_ref(),
            &mut self.state,
            &self.cfg,
        )
        .map_err(to_py)?;
        Ok((class_ids(&out.labels), out.moving_flags))
    }

    #[getter]
    fn missing_pose_warnings(&self) -> usize {
        self.state.missing_pose_warnings
    }
}

#[pymodule]
fn pyinsmos(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyBox>()?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRefiner>()?;
    m.add_function(wrap_pyfunction!(compose_poses, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(moving_iou, m)?)?;
    m.add_function(wrap_pyfunction!(read_scan, m)?)?;
    m.add_function(wrap_pyfunction!(write_scan, m)?)?;
    m.add_function(wrap_pyfunction!(read_labels, m)?)?;
    m.add_function(wrap_pyfunction!(write_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(read_poses, m)?)?;
    m.add_function(wrap_pyfunction!(read_boxes, m)?)?;
    m.add_function(wrap_pyfunction!(write_boxes, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_scene, m)?)?;
    Ok(())
}
