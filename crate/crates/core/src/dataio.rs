//! SemanticKITTI-style sequence files, box annotations and predictions.
//!
//! * scans: little-endian `f32` quadruples `x y z intensity`
//! * labels: little-endian `u32` per point, semantic id in the lower 16 bits
//! * poses: one camera-frame pose per line, 12 floats of a row-major 3×4 matrix
//! * calibration: `key: values` lines, `Tr` holds the sensor-to-camera transform
//! * boxes: `frame class x y z l m q yaw [score]`, one record per line
//! * confidences: little-endian `f32` moving probability per point

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::SyntheticScene;
use crate::geometry::{LidarPoint, PointClass, Pose, QuantizationConfig, Scan};
use crate::instances::{InstanceClass, InstancePrediction};
use crate::network::MovingLabels;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn check_record_size(path: &Path, len: usize, record: usize) -> Result<()> {
    if len % record != 0 {
        let offset = len - len % record;
        return Err(Error::malformed(
            path,
            format!("byte {offset}"),
            format!("truncated record, size {len} is not a multiple of {record}"),
        ));
    }
    Ok(())
}

pub fn decode_scan(path: &Path, bytes: &[u8]) -> Result<Scan> {
    check_record_size(path, bytes.len(), 16)?;
    let points = bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap()) as f64;
            LidarPoint::new(f(0), f(1), f(2), f(3))
        })
        .collect();
    Scan::new(points, None).map_err(|e| Error::malformed(path, "point data", e.to_string()))
}

pub fn read_scan(path: &Path) -> Result<Scan> {
    decode_scan(path, &read_bytes(path)?)
}

pub fn encode_scan(scan: &Scan) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 * scan.len());
    for p in &scan.points {
        for v in [p.position[0], p.position[1], p.position[2], p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Coordinates are stored as `f32`.
pub fn write_scan(path: &Path, scan: &Scan) -> Result<()> {
    write_bytes(path, &encode_scan(scan))
}

/// Semantic id to class lookup, with the ids written for predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMapping {
    #[serde(default)]
    pub unlabeled: BTreeSet<u16>,
    #[serde(rename = "static")]
    pub static_ids: BTreeSet<u16>,
    pub moving: BTreeSet<u16>,
    /// Ids written by [`write_predictions`], indexed like [`PointClass::ALL`].
    pub output: OutputIds,
    #[serde(skip)]
    pub source: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputIds {
    pub unlabeled: u16,
    #[serde(rename = "static")]
    pub static_id: u16,
    pub moving: u16,
}

impl Default for LabelMapping {
    fn default() -> Self {
        Self {
            unlabeled: [0, 1].into(),
            static_ids: [9].into(),
            moving: (251..=259).collect(),
            output: OutputIds {
                unlabeled: 0,
                static_id: 9,
                moving: 251,
            },
            source: None,
        }
    }
}

impl LabelMapping {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let m: Self = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut m = Self::from_toml_str(&read_text(path)?)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        m.source = Some(path.to_path_buf());
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let sets = [&self.unlabeled, &self.static_ids, &self.moving];
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            if let Some(id) = sets[a].intersection(sets[b]).next() {
                return Err(Error::InvalidConfig(format!("label id {id} is mapped to two classes")));
            }
        }
        let out = self.output;
        for (id, class) in [
            (out.unlabeled, PointClass::Unlabeled),
            (out.static_id, PointClass::Static),
            (out.moving, PointClass::Moving),
        ] {
            if self.class_of(id as u32) != class {
                return Err(Error::InvalidConfig(format!(
                    "output id {id} does not read back as {class:?}"
                )));
            }
        }
        Ok(())
    }

    /// Unknown ids fall back to unlabeled.
    pub fn class_of(&self, word: u32) -> PointClass {
        let id = (word & 0xFFFF) as u16;
        if self.moving.contains(&id) {
            PointClass::Moving
        } else if self.static_ids.contains(&id) {
            PointClass::Static
        } else {
            PointClass::Unlabeled
        }
    }

    pub fn output_id(&self, class: PointClass) -> u32 {
        (match class {
            PointClass::Unlabeled => self.output.unlabeled,
            PointClass::Static => self.output.static_id,
            PointClass::Moving => self.output.moving,
        }) as u32
    }
}

fn decode_words(path: &Path, bytes: &[u8]) -> Result<Vec<u32>> {
    check_record_size(path, bytes.len(), 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Raw label words including the instance id in the upper 16 bits.
pub fn read_label_words(path: &Path) -> Result<Vec<u32>> {
    decode_words(path, &read_bytes(path)?)
}

pub fn read_labels(path: &Path, mapping: &LabelMapping) -> Result<Vec<PointClass>> {
    Ok(read_label_words(path)?.into_iter().map(|w| mapping.class_of(w)).collect())
}

pub fn encode_labels(labels: &[PointClass], mapping: &LabelMapping) -> Vec<u8> {
    labels
        .iter()
        .flat_map(|&c| mapping.output_id(c).to_le_bytes())
        .collect()
}

/// Writes labels with the mapping's canonical output ids.
pub fn write_labels(path: &Path, labels: &[PointClass], mapping: &LabelMapping) -> Result<()> {
    write_bytes(path, &encode_labels(labels, mapping))
}

pub fn write_predictions(path: &Path, labels: &MovingLabels, mapping: &LabelMapping) -> Result<()> {
    write_labels(path, &labels.labels, mapping)
}

pub fn write_confidences(path: &Path, confidence: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = confidence.iter().flat_map(|&c| (c as f32).to_le_bytes()).collect();
    write_bytes(path, &bytes)
}

pub fn read_confidences(path: &Path) -> Result<Vec<f64>> {
    Ok(decode_words(path, &read_bytes(path)?)?
        .into_iter()
        .map(|w| f32::from_bits(w) as f64)
        .collect())
}

fn parse_floats(path: &Path, line_no: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::malformed(path, format!("line {line_no}"), format!("bad number {s:?}")))
        })
        .collect()
}

fn pose_from_fields(path: &Path, line_no: usize, fields: &[&str]) -> Result<Pose> {
    if fields.len() != 12 {
        return Err(Error::malformed(
            path,
            format!("line {line_no}"),
            format!("expected 12 values, found {}", fields.len()),
        ));
    }
    let v = parse_floats(path, line_no, fields)?;
    Pose::from_3x4(&v.try_into().unwrap()).map_err(|e| Error::malformed(path, format!("line {line_no}"), e.to_string()))
}

/// Absolute camera-frame poses, one per non-empty line.
pub fn read_camera_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| pose_from_fields(path, i + 1, &l.split_whitespace().collect::<Vec<_>>()))
        .collect()
}

fn format_3x4(pose: &Pose) -> String {
    pose.to_3x4().map(|v| format!("{v:e}")).join(" ")
}

pub fn write_camera_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut out = String::new();
    for p in poses {
        out.push_str(&format_3x4(p));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// The sensor-to-camera transform `Tr`.
pub fn read_calibration(path: &Path) -> Result<Pose> {
    let text = read_text(path)?;
    for (i, line) in text.lines().enumerate() {
        let Some((key, values)) = line.split_once(':') else {
            continue;
        };
        if key.trim() == "Tr" {
            return pose_from_fields(path, i + 1, &values.split_whitespace().collect::<Vec<_>>());
        }
    }
    Err(Error::malformed(path, "end of file", "no Tr entry"))
}

pub fn write_calibration(path: &Path, tr: &Pose) -> Result<()> {
    fs::write(path, format!("Tr: {}\n", format_3x4(tr))).map_err(|e| Error::io(path, e))
}

/// Camera pose to sensor pose: `Tr⁻¹ · T_cam · Tr`.
pub fn camera_to_sensor(camera: &Pose, tr: &Pose) -> Pose {
    tr.inverse().compose(camera).compose(tr)
}

/// Differences absolute poses: entry `k - 1` is the pose of scan `k` in
/// the frame of scan `k - 1`.
pub fn relative_poses(absolute: &[Pose]) -> Vec<Pose> {
    absolute.windows(2).map(|w| w[0].inverse().compose(&w[1])).collect()
}

/// Sensor-frame relatives between consecutive scans, see [`relative_poses`].
pub fn read_poses(pose_path: &Path, calib_path: &Path) -> Result<Vec<Pose>> {
    let tr = read_calibration(calib_path)?;
    let sensor: Vec<Pose> = read_camera_poses(pose_path)?
        .iter()
        .map(|p| camera_to_sensor(p, &tr))
        .collect();
    Ok(relative_poses(&sensor))
}

/// Pose chain for [`crate::network::align_window`] at frame `f`, using at
/// most `n` scans.
pub fn window_poses(relatives: &[Pose], f: usize, n: usize) -> Vec<Pose> {
    let count = n.min(f + 1);
    (1..count).map(|j| relatives[f - j].inverse()).collect()
}

/// Pose of frame `f - 1` in frame `f`.
pub fn previous_in_current(relatives: &[Pose], f: usize) -> Option<Pose> {
    f.checked_sub(1).and_then(|k| relatives.get(k)).map(Pose::inverse)
}

/// Sensor-to-camera transform with the camera looking along the sensor's
/// x axis (camera x right, y down, z forward).
pub fn default_calibration() -> Pose {
    Pose::from_3x4(&[
        0.0, -1.0, 0.0, 0.0, //
        0.0, 0.0, -1.0, -0.08, //
        1.0, 0.0, 0.0, -0.27,
    ])
    .expect("rotation is orthonormal")
}

/// Boxes grouped by frame index.
pub type FrameBoxes = BTreeMap<usize, Vec<InstancePrediction>>;

pub fn parse_box_line(path: &Path, line_no: usize, line: &str) -> Result<(usize, InstancePrediction)> {
    let at = || format!("line {line_no}");
    let fields: Vec<&str> = line.split_whitespace().collect();
    if !(fields.len() == 9 || fields.len() == 10) {
        return Err(Error::malformed(
            path,
            at(),
            format!("expected 9 or 10 fields, found {}", fields.len()),
        ));
    }
    let frame = fields[0]
        .parse::<usize>()
        .map_err(|_| Error::malformed(path, at(), format!("bad frame index {:?}", fields[0])))?;
    let class: InstanceClass = fields[1].parse()?;
    let v = parse_floats(path, line_no, &fields[2..])?;
    let mut b = InstancePrediction::new(class, [v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6]);
    if let Some(&s) = v.get(7) {
        b.score = s;
    }
    b.validate()
        .map_err(|e| Error::malformed(path, at(), e.to_string()))?;
    Ok((frame, b))
}

/// Blank lines and lines starting with `#` are skipped.
pub fn parse_boxes(path: &Path, text: &str) -> Result<FrameBoxes> {
    let mut out = FrameBoxes::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (frame, b) = parse_box_line(path, i + 1, t)?;
        out.entry(frame).or_default().push(b);
    }
    Ok(out)
}

pub fn read_boxes(path: &Path) -> Result<FrameBoxes> {
    parse_boxes(path, &read_text(path)?)
}

/// Six decimals; the score column is omitted when it equals 1.
pub fn format_box(frame: usize, b: &InstancePrediction) -> String {
    let mut s = format!("{frame} {}", b.class);
    for v in b.center.iter().chain(&b.size).chain([&b.yaw]) {
        write!(s, " {v:.6}").unwrap();
    }
    if b.score != 1.0 {
        write!(s, " {:.6}", b.score).unwrap();
    }
    s
}

pub fn format_boxes(boxes: &FrameBoxes) -> String {
    let mut out = String::new();
    for (f, list) in boxes {
        for b in list {
            out.push_str(&format_box(*f, b));
            out.push('\n');
        }
    }
    out
}

pub fn write_boxes(path: &Path, boxes: &FrameBoxes) -> Result<()> {
    for b in boxes.values().flatten() {
        b.validate()?;
    }
    fs::write(path, format_boxes(boxes)).map_err(|e| Error::io(path, e))
}

/// `manifest.toml` of one sequence directory; paths are relative to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub frames: usize,
    /// Holds `000000.bin`, `000001.bin`, ...
    pub scans: PathBuf,
    /// Holds `000000.label`, ...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub poses: PathBuf,
    pub calibration: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<QuantizationConfig>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn frame_file(dir: &Path, frame: usize, ext: &str) -> PathBuf {
    dir.join(format!("{frame:06}.{ext}"))
}

impl SequenceManifest {
    /// Accepts the manifest file itself or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = read_text(&file)?;
        let mut m: Self = toml::from_str(&text)
            .map_err(|e| Error::malformed(&file, "manifest", e.message().to_string()))?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate(&file)?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let file = dir.join(MANIFEST_FILE);
        let text = toml::to_string(self).expect("manifest is always representable as TOML");
        fs::write(&file, text).map_err(|e| Error::io(&file, e))
    }

    fn validate(&self, file: &Path) -> Result<()> {
        let mut required = vec![self.pose_path(), self.calibration_path()];
        required.extend(self.boxes_path());
        for f in 0..self.frames {
            required.push(self.scan_path(f));
            required.extend(self.label_path(f));
        }
        if let Some(missing) = required.iter().find(|p| !p.is_file()) {
            return Err(Error::malformed(
                file,
                "manifest",
                format!("referenced file {} does not exist", missing.display()),
            ));
        }
        if let Some(q) = &self.quantization {
            q.validate()?;
        }
        Ok(())
    }

    pub fn scan_path(&self, frame: usize) -> PathBuf {
        frame_file(&self.root.join(&self.scans), frame, "bin")
    }

    pub fn label_path(&self, frame: usize) -> Option<PathBuf> {
        self.labels.as_ref().map(|d| frame_file(&self.root.join(d), frame, "label"))
    }

    pub fn pose_path(&self) -> PathBuf {
        self.root.join(&self.poses)
    }

    pub fn calibration_path(&self) -> PathBuf {
        self.root.join(&self.calibration)
    }

    pub fn boxes_path(&self) -> Option<PathBuf> {
        self.boxes.as_ref().map(|b| self.root.join(b))
    }

    /// Relative sensor poses, checked against the frame count.
    pub fn relative_poses(&self) -> Result<Vec<Pose>> {
        let rel = read_poses(&self.pose_path(), &self.calibration_path())?;
        if rel.len() + 1 != self.frames {
            return Err(Error::malformed(
                self.pose_path(),
                "end of file",
                format!("{} poses for {} frames", rel.len() + 1, self.frames),
            ));
        }
        Ok(rel)
    }

    pub fn read_scan(&self, frame: usize, mapping: &LabelMapping) -> Result<Scan> {
        let mut scan = read_scan(&self.scan_path(frame))?;
        if let Some(p) = self.label_path(frame) {
            let labels = read_labels(&p, mapping)?;
            if labels.len() != scan.len() {
                return Err(Error::malformed(
                    &p,
                    "end of file",
                    format!("{} labels for {} points", labels.len(), scan.len()),
                ));
            }
            scan.labels = Some(labels);
        }
        Ok(scan)
    }
}

/// Writes a synthetic scene as a sequence directory with ground-truth
/// labels and boxes, returning its manifest.
pub fn write_sequence(dir: &Path, scene: &SyntheticScene, mapping: &LabelMapping) -> Result<SequenceManifest> {
    let scans = PathBuf::from("velodyne");
    let labels = PathBuf::from("labels");
    for sub in [&scans, &labels] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for (f, scan) in scene.scans.iter().enumerate() {
        write_scan(&frame_file(&dir.join(&scans), f, "bin"), scan)?;
        write_labels(&frame_file(&dir.join(&labels), f, "label"), scene.labels(f), mapping)?;
    }
    let tr = default_calibration();
    let camera: Vec<Pose> = scene
        .world_from_sensor
        .iter()
        .map(|s| tr.compose(s).compose(&tr.inverse()))
        .collect();
    let manifest = SequenceManifest {
        frames: scene.len(),
        scans,
        labels: Some(labels),
        poses: "poses.txt".into(),
        calibration: "calib.txt".into(),
        boxes: Some("boxes.txt".into()),
        quantization: None,
        root: dir.to_path_buf(),
    };
    write_camera_poses(&manifest.pose_path(), &camera)?;
    write_calibration(&manifest.calibration_path(), &tr)?;
    let boxes: FrameBoxes = (0..scene.len()).map(|f| (f, scene.boxes(f))).collect();
    write_boxes(&dir.join("boxes.txt"), &boxes)?;
    manifest.save(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn scan_examples() {
        let bytes: Vec<u8> = [1.0f32, 2.0, 3.0, 0.5].iter().flat_map(|v| v.to_le_bytes()).collect();
        let s = decode_scan(p(), &bytes).unwrap();
        assert_eq!(s.points, vec![LidarPoint::new(1.0, 2.0, 3.0, 0.5)]);
        assert!(decode_scan(p(), &[]).unwrap().is_empty());
        let mut odd = bytes.clone();
        odd.push(0);
        match decode_scan(p(), &odd) {
            Err(Error::Malformed { position, .. }) => assert_eq!(position, "byte 16"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn default_mapping() {
        let m = LabelMapping::default();
        assert_eq!(m.class_of(0x0000_0009), PointClass::Static);
        assert_eq!(m.class_of(0x0000_00FB), PointClass::Moving);
        assert_eq!(m.class_of(0x0003_0102), PointClass::Moving);
        assert_eq!(m.class_of(77), PointClass::Unlabeled);
        assert_eq!(m.class_of(1), PointClass::Unlabeled);
        assert_eq!(m.class_of(0x0005_0009), PointClass::Static);
    }

    #[test]
    fn shipped_mapping_file_is_the_default() {
        let text = include_str!("../../../configs/label_mapping.toml");
        assert_eq!(LabelMapping::from_toml_str(text).unwrap(), LabelMapping::default());
    }

    #[test]
    fn overlapping_mapping_rejected() {
        let mut m = LabelMapping::default();
        m.static_ids.insert(251);
        assert!(m.validate().is_err());
    }

    #[test]
    fn prediction_words() {
        let labels = [PointClass::Unlabeled, PointClass::Static, PointClass::Moving];
        let bytes = encode_labels(&labels, &LabelMapping::default());
        assert_eq!(bytes.len(), 12);
        assert_eq!(decode_words(p(), &bytes).unwrap(), vec![0, 9, 251]);
    }

    #[test]
    fn calibration_conjugation() {
        let cam = [Pose::identity(), Pose::translation(1.0, 0.0, 0.0)];
        let tr = Pose::rot_z(std::f64::consts::FRAC_PI_2);
        let sensor: Vec<Pose> = cam.iter().map(|c| camera_to_sensor(c, &tr)).collect();
        let rel = relative_poses(&sensor);
        assert!(rel[0].max_abs_diff(&Pose::translation(0.0, -1.0, 0.0)) < 1e-12);
    }

    #[test]
    fn box_lines() {
        let (f, b) = parse_box_line(p(), 1, "3 car 1.5 -2 0.75 4 1.8 1.5 0.25").unwrap();
        assert_eq!(f, 3);
        assert_eq!(b.class, InstanceClass::Car);
        assert_eq!(b.score, 1.0);
        assert_eq!(format_box(f, &b), "3 car 1.500000 -2.000000 0.750000 4.000000 1.800000 1.500000 0.250000");
        assert!(matches!(
            parse_box_line(p(), 1, "0 truck 0 0 0 1 1 1 0"),
            Err(Error::UnknownClass { .. })
        ));
        assert!(parse_box_line(p(), 2, "0 car 0 0 0 0 1 1 0").is_err());
        assert!(parse_box_line(p(), 2, "0 car 0 0 0 1 1").is_err());
        assert!(parse_boxes(p(), "").unwrap().is_empty());
        let with_score = parse_boxes(p(), "# header\n\n1 cyclist 0 0 0 1 1 1 0 0.5\n").unwrap();
        assert_eq!(with_score[&1][0].score, 0.5);
    }
}
