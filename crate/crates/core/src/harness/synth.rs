//! Synthetic sequences with exact labels, boxes and poses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LidarPoint, PointClass, Pose, Scan};
use crate::instances::{InstanceClass, InstancePrediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub n_frames: usize,
    pub n_static_objects: usize,
    pub n_moving_objects: usize,
    /// Speed range of moving objects in m/s when `velocities` is empty.
    pub speed_range: [f64; 2],
    /// Explicit world-frame velocities for the moving objects.
    pub velocities: Vec<[f64; 3]>,
    pub sensor_velocity: [f64; 3],
    /// Sensor heading change in rad/s.
    pub sensor_yaw_rate: f64,
    /// Objects stay inside `[-extent, extent]^2` around the start position.
    pub extent: f64,
    pub ground_points: usize,
    pub wall_points: usize,
    /// Points farther than this (in the xy plane) from the sensor are not observed.
    pub sensor_range: f64,
    pub delta_t: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_frames: 8,
            n_static_objects: 3,
            n_moving_objects: 2,
            speed_range: [3.0, 8.0],
            velocities: Vec::new(),
            sensor_velocity: [1.0, 0.0, 0.0],
            sensor_yaw_rate: 0.05,
            extent: 11.0,
            ground_points: 700,
            wall_points: 160,
            sensor_range: 15.0,
            delta_t: 0.1,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = self.velocities.iter().flatten().chain(&self.sensor_velocity).all(|v| v.is_finite())
            && self.speed_range.iter().all(|v| v.is_finite())
            && self.sensor_yaw_rate.is_finite();
        if !finite {
            return Err(Error::InvalidConfig("scene velocities must be finite".into()));
        }
        if self.n_frames == 0 || !(self.delta_t > 0.0) || !(self.extent > 0.0) || !(self.sensor_range > 0.0) {
            return Err(Error::InvalidConfig(format!("degenerate scene spec {self:?}")));
        }
        if self.speed_range[0] > self.speed_range[1] || self.speed_range[0] < 0.0 {
            return Err(Error::InvalidConfig("speed_range must be an increasing pair of speeds".into()));
        }
        Ok(())
    }
}

/// One object over the whole sequence, in world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub class: InstanceClass,
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 3],
    /// Box center at every frame.
    pub centers: Vec<[f64; 3]>,
}

impl ObjectTrack {
    pub fn is_moving(&self) -> bool {
        self.velocity.iter().any(|v| *v != 0.0)
    }

    pub fn world_box(&self, frame: usize) -> InstancePrediction {
        InstancePrediction::new(self.class, self.centers[frame], self.size, self.yaw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    /// Scans in their own sensor frames, with exact labels.
    pub scans: Vec<Scan>,
    pub world_from_sensor: Vec<Pose>,
    pub objects: Vec<ObjectTrack>,
}

impl SyntheticScene {
    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    /// Pose of frame `f - 1` in frame `f`; identity for the first frame.
    pub fn pose_to_previous(&self, f: usize) -> Pose {
        if f == 0 {
            return Pose::identity();
        }
        self.world_from_sensor[f].inverse().compose(&self.world_from_sensor[f - 1])
    }

    /// Ground-truth boxes of frame `f` in its sensor frame.
    pub fn boxes(&self, f: usize) -> Vec<InstancePrediction> {
        let to_sensor = self.world_from_sensor[f].inverse();
        self.objects.iter().map(|o| o.world_box(f).transformed(&to_sensor)).collect()
    }

    pub fn moving_flags(&self) -> Vec<bool> {
        self.objects.iter().map(ObjectTrack::is_moving).collect()
    }

    /// Scans `f, f-1, ...` (at most `n`) and the matching relative poses
    /// `T_j^{j-1}` for [`crate::network::align_window`].
    pub fn window(&self, f: usize, n: usize) -> (Vec<Scan>, Vec<Pose>) {
        let count = n.min(f + 1);
        let scans = (0..count).map(|j| self.scans[f - j].clone()).collect();
        let poses = (1..count).map(|j| self.pose_to_previous(f - j + 1)).collect();
        (scans, poses)
    }

    pub fn labels(&self, f: usize) -> &[PointClass] {
        self.scans[f].labels.as_deref().unwrap_or(&[])
    }
}

fn class_size(class: InstanceClass) -> [f64; 3] {
    match class {
        InstanceClass::Car => [4.0, 1.8, 1.5],
        InstanceClass::Pedestrian => [0.6, 0.6, 1.7],
        InstanceClass::Cyclist => [1.8, 0.6, 1.7],
    }
}

fn surface_samples(class: InstanceClass) -> usize {
    match class {
        InstanceClass::Car => 160,
        InstanceClass::Pedestrian => 40,
        InstanceClass::Cyclist => 60,
    }
}

/// Points on the box surface in the box frame, faces weighted by area.
fn sample_surface(rng: &mut ChaCha8Rng, size: [f64; 3], n: usize) -> Vec<[f64; 3]> {
    let [l, m, q] = size;
    let areas = [m * q, m * q, l * q, l * q, l * m];
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            while face < 4 && pick >= areas[face] {
                pick -= areas[face];
                face += 1;
            }
            let u = rng.gen_range(-0.5..0.5);
            let v = rng.gen_range(-0.5..0.5);
            // Faces shrink by a hair so points never land outside the box.
            let s = 0.5 - 1e-6;
            match face {
                0 => [s * l, u * m, v * q],
                1 => [-s * l, u * m, v * q],
                2 => [u * l, s * m, v * q],
                3 => [u * l, -s * m, v * q],
                _ => [u * l, v * m, s * q],
            }
        })
        .collect()
}

fn footprint_radius(size: [f64; 3]) -> f64 {
    0.5 * (size[0] * size[0] + size[1] * size[1]).sqrt()
}

fn random_class(rng: &mut ChaCha8Rng) -> InstanceClass {
    match rng.gen_range(0..4) {
        0 | 1 => InstanceClass::Car,
        2 => InstanceClass::Pedestrian,
        _ => InstanceClass::Cyclist,
    }
}

fn clear_of(tracks: &[ObjectTrack], centers: &[[f64; 3]], size: [f64; 3]) -> bool {
    tracks.iter().all(|t| {
        let gap = footprint_radius(t.size) + footprint_radius(size) + 0.5;
        t.centers
            .iter()
            .zip(centers)
            .all(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]) > gap)
    })
}

/// Generates a scene. Static objects and the background keep fixed world
/// points; moving objects carry their surface points rigidly.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nf = spec.n_frames;
    let dt = spec.delta_t;
    let e = spec.extent;

    let mut objects: Vec<ObjectTrack> = Vec::new();
    let n_moving = spec.n_moving_objects.max(spec.velocities.len());
    for k in 0..n_moving + spec.n_static_objects {
        let moving = k < n_moving;
        for _attempt in 0..200 {
            let class = random_class(&mut rng);
            let base = class_size(class);
            let size = base.map(|s| s * rng.gen_range(0.9..1.1));
            let velocity = if !moving {
                [0.0; 3]
            } else if let Some(v) = spec.velocities.get(k) {
                *v
            } else {
                let speed = rng.gen_range(spec.speed_range[0]..=spec.speed_range[1]);
                let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                [speed * heading.cos(), speed * heading.sin(), 0.0]
            };
            let yaw = if velocity[0] != 0.0 || velocity[1] != 0.0 {
                velocity[1].atan2(velocity[0])
            } else {
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)
            };
            let span = (nf - 1) as f64 * dt;
            let mid = [rng.gen_range(-0.8 * e..0.8 * e), rng.gen_range(-0.8 * e..0.8 * e)];
            let start = [mid[0] - velocity[0] * span / 2.0, mid[1] - velocity[1] * span / 2.0];
            let centers: Vec<[f64; 3]> = (0..nf)
                .map(|f| {
                    let t = f as f64 * dt;
                    [start[0] + velocity[0] * t, start[1] + velocity[1] * t, size[2] / 2.0 + velocity[2] * t]
                })
                .collect();
            let r = footprint_radius(size);
            let inside = centers.iter().all(|c| c[0].abs() + r <= e && c[1].abs() + r <= e);
            if inside && clear_of(&objects, &centers, size) {
                objects.push(ObjectTrack {
                    class,
                    size,
                    yaw,
                    velocity,
                    centers,
                });
                break;
            }
        }
    }

    let margin = spec.sensor_range;
    let mut world: Vec<([f64; 3], f64)> = Vec::new();
    for _ in 0..spec.ground_points {
        let p = [
            rng.gen_range(-margin..margin),
            rng.gen_range(-margin..margin),
            rng.gen_range(-0.15..-0.05),
        ];
        world.push((p, rng.gen_range(0.05..0.3)));
    }
    for side in [-1.0, 1.0] {
        let y = side * (e + 1.0);
        let x0 = rng.gen_range(-e..0.0);
        let x1 = rng.gen_range(0.0..e);
        for _ in 0..spec.wall_points / 2 {
            let p = [rng.gen_range(x0..x1), y + rng.gen_range(-0.05..0.05), rng.gen_range(0.0..2.5)];
            world.push((p, rng.gen_range(0.3..0.6)));
        }
    }
    let object_points: Vec<Vec<([f64; 3], f64)>> = objects
        .iter()
        .map(|o| {
            sample_surface(&mut rng, o.size, surface_samples(o.class))
                .into_iter()
                .map(|p| (p, rng.gen_range(0.5..0.9)))
                .collect()
        })
        .collect();

    let world_from_sensor: Vec<Pose> = (0..nf)
        .map(|f| {
            let t = f as f64 * dt;
            let v = spec.sensor_velocity;
            Pose::from_yaw_translation(spec.sensor_yaw_rate * t, [v[0] * t, v[1] * t, v[2] * t])
        })
        .collect();

    let mut scans = Vec::with_capacity(nf);
    for f in 0..nf {
        let pose = &world_from_sensor[f];
        let to_sensor = pose.inverse();
        let origin = pose.translation_vector();
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut emit = |p: [f64; 3], intensity: f64, label: PointClass| {
            if (p[0] - origin[0]).hypot(p[1] - origin[1]) <= spec.sensor_range {
                let q = to_sensor.transform_point(p);
                points.push(LidarPoint::new(q[0], q[1], q[2], intensity));
                labels.push(label);
            }
        };
        for (p, i) in &world {
            emit(*p, *i, PointClass::Static);
        }
        for (o, pts) in objects.iter().zip(&object_points) {
            let local_to_world = Pose::from_yaw_translation(o.yaw, o.centers[f]);
            let label = if o.is_moving() { PointClass::Moving } else { PointClass::Static };
            for (p, i) in pts {
                emit(local_to_world.transform_point(*p), *i, label);
            }
        }
        scans.push(Scan::new(points, Some(labels))?.with_index(f));
    }
    Ok(SyntheticScene {
        spec: spec.clone(),
        scans,
        world_from_sensor,
        objects,
    })
}
