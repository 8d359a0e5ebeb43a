//! Synthetic driving scenes with ground truth.
//!
//! Objects move at constant velocity around an ego vehicle that drives on a
//! gentle arc. Cameras see flat-shaded box silhouettes that darken at night and
//! lose contrast and gain noise in rain; radars return points on the
//! sensor-facing side of each footprint and never see the weather.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, CameraSpec, Pose, SensorRig};
use crate::radar::{PointCloudSet, RadarPoint};
use crate::types::{wrap_angle, Annotation, Attribute, Box3D, ObjectClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub frames_per_scene: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Half-width of the square region (ego frame) where objects are annotated.
    pub world_extent: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    pub max_ego_speed: f64,
    pub frame_interval: f64,
    pub rain_probability: f64,
    pub night_probability: f64,
    /// Standard deviation of additive rain noise, in `[0, 1]` intensity units.
    pub rain_noise: f64,
    pub rain_contrast: f64,
    pub night_brightness: f64,
    pub radar_dropout: f64,
    pub radar_noise: f64,
    pub clutter_points: usize,
    pub radar_range: f64,
    pub radar_fov_deg: f64,
    pub val_scenes: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames_per_scene: 8,
            min_objects: 2,
            max_objects: 6,
            world_extent: 22.0,
            min_speed: 0.0,
            max_speed: 6.0,
            max_ego_speed: 4.0,
            frame_interval: 0.5,
            rain_probability: 0.4,
            night_probability: 0.3,
            rain_noise: 0.12,
            rain_contrast: 0.35,
            night_brightness: 0.2,
            radar_dropout: 0.1,
            radar_noise: 0.1,
            clutter_points: 8,
            radar_range: 60.0,
            radar_fov_deg: 100.0,
            val_scenes: 2,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let factor = |f: f64| f > 0.0 && f <= 1.0;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames_per_scene == 0 {
            return bad("frames_per_scene must be positive");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if !(prob(self.rain_probability) && prob(self.night_probability) && prob(self.radar_dropout)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(factor(self.rain_contrast) && factor(self.night_brightness)) {
            return bad("contrast and brightness factors must lie in (0, 1]");
        }
        if !(self.world_extent > 0.0 && self.radar_range > 0.0 && self.frame_interval > 0.0 && self.radar_fov_deg > 0.0) {
            return bad("extents, range and interval must be positive");
        }
        if self.min_speed < 0.0 || self.max_speed < self.min_speed || self.max_ego_speed < 0.0 {
            return bad("invalid speed range");
        }
        if self.rain_noise < 0.0 || self.radar_noise < 0.0 {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }
}

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CameraImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl CameraImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self { width, height, data: rgb.iter().copied().cycle().take(width * height * 3).collect() }
    }

    /// `(H*W) x 3` channels-last matrix in `[0, 1]`.
    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.width * self.height, 3, self.data.iter().map(|&v| v as f64 / 255.0).collect())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / (255.0 * self.data.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: String,
    pub timestamp: f64,
    /// World-from-ego pose.
    pub ego_pose: Pose,
    pub images: Vec<CameraImage>,
    pub radar: PointCloudSet,
    pub annotations: Vec<Annotation>,
    pub rain: bool,
    pub night: bool,
}

impl FrameRecord {
    /// Current ego frame expressed in `prev`'s ego frame.
    pub fn ego_motion_from(&self, prev: &FrameRecord) -> Pose {
        prev.ego_pose.inverse().compose(&self.ego_pose)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub frames: Vec<FrameRecord>,
}

impl Scene {
    pub fn rain(&self) -> bool {
        self.frames.first().is_some_and(|f| f.rain)
    }

    pub fn night(&self) -> bool {
        self.frames.first().is_some_and(|f| f.night)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub scenes: Vec<Scene>,
    pub splits: Vec<Split>,
    pub rig: SensorRig,
    pub grid: BevGridSpec,
    pub config: SceneConfig,
}

impl SceneDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().zip(&self.splits).filter(move |(_, s)| **s == split).map(|(sc, _)| sc)
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameRecord> {
        self.scenes.iter().flat_map(|s| &s.frames)
    }
}

/// Ground truth of one moving object in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldObject {
    pub class: ObjectClass,
    pub size: [f64; 3],
    pub position: [f64; 2],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

impl WorldObject {
    pub fn at(&self, t: f64) -> [f64; 2] {
        [self.position[0] + self.velocity[0] * t, self.position[1] + self.velocity[1] * t]
    }

    /// Box in the ego frame given the world-from-ego pose at time `t`.
    pub fn ego_box(&self, ego: &Pose, t: f64) -> Box3D {
        let p = self.at(t);
        let inv = ego.inverse();
        let c = inv.apply(&Vector3::new(p[0], p[1], self.size[2] / 2.0));
        let v = inv.rotation * Vector3::new(self.velocity[0], self.velocity[1], 0.0);
        Box3D {
            center: [c.x, c.y, c.z],
            size: self.size,
            yaw: wrap_angle(self.yaw - ego.yaw()),
            velocity: [v.x, v.y],
        }
    }
}

fn class_size(class: ObjectClass) -> [f64; 3] {
    match class {
        ObjectClass::Vehicle => [4.5, 1.9, 1.6],
        ObjectClass::Motorcycle => [2.1, 0.8, 1.4],
        ObjectClass::Pedestrian => [0.7, 0.7, 1.75],
        ObjectClass::Barrier => [2.5, 0.5, 1.0],
    }
}

fn class_color(class: ObjectClass) -> [f64; 3] {
    match class {
        ObjectClass::Vehicle => [0.95, 0.55, 0.1],
        ObjectClass::Motorcycle => [0.2, 0.35, 0.95],
        ObjectClass::Pedestrian => [0.9, 0.1, 0.45],
        ObjectClass::Barrier => [0.15, 0.85, 0.2],
    }
}

fn class_points(class: ObjectClass) -> usize {
    match class {
        ObjectClass::Vehicle => 6,
        ObjectClass::Motorcycle => 3,
        ObjectClass::Pedestrian => 2,
        ObjectClass::Barrier => 3,
    }
}

fn class_cross_section(class: ObjectClass) -> f64 {
    match class {
        ObjectClass::Vehicle => 10.0,
        ObjectClass::Motorcycle => 3.0,
        ObjectClass::Pedestrian => -5.0,
        ObjectClass::Barrier => 5.0,
    }
}

pub const BACKGROUND: [f64; 3] = [0.45, 0.47, 0.5];

/// Derives an independent stream seed from a master seed and a tag.
pub fn sub_seed(seed: u64, index: u64, stream: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_LAYOUT: u64 = 1;
const STREAM_WEATHER: u64 = 2;
const STREAM_CAMERA: u64 = 3;
const STREAM_RADAR: u64 = 4;

/// Generates scene `index`; fully determined by `(config.seed, index)`.
pub fn generate_scene(config: &SceneConfig, rig: &SensorRig, index: usize) -> Scene {
    let scene_seed = sub_seed(config.seed, index as u64, 0);
    let mut layout = ChaCha8Rng::seed_from_u64(sub_seed(scene_seed, 0, STREAM_LAYOUT));
    let mut weather = ChaCha8Rng::seed_from_u64(sub_seed(scene_seed, 0, STREAM_WEATHER));
    let rain = weather.gen::<f64>() < config.rain_probability;
    let night = weather.gen::<f64>() < config.night_probability;

    let ego_speed = layout.gen_range(0.0..=config.max_ego_speed);
    let ego_yaw_rate = layout.gen_range(-0.1..=0.1);
    let n_obj = layout.gen_range(config.min_objects..=config.max_objects);
    let mut objects: Vec<WorldObject> = Vec::with_capacity(n_obj);
    let ext = config.world_extent;
    let mut attempts = 0;
    while objects.len() < n_obj && attempts < 1000 {
        attempts += 1;
        let class = ObjectClass::ALL[layout.gen_range(0..ObjectClass::COUNT)];
        let base = class_size(class);
        let scale = layout.gen_range(0.9..1.1);
        let size = [base[0] * scale, base[1] * scale, base[2] * layout.gen_range(0.95..1.05)];
        let position = [layout.gen_range(-ext..ext), layout.gen_range(-ext..ext)];
        let yaw = layout.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let max_speed = match class {
            ObjectClass::Barrier => 0.0,
            ObjectClass::Pedestrian => config.max_speed.min(1.5),
            _ => config.max_speed,
        };
        let speed = if max_speed <= config.min_speed || layout.gen::<f64>() < 0.3 {
            0.0
        } else {
            layout.gen_range(config.min_speed..=max_speed)
        };
        let velocity = [speed * yaw.cos(), speed * yaw.sin()];
        if position[0].hypot(position[1]) < 5.0 {
            continue;
        }
        let clear = objects.iter().all(|o| (o.position[0] - position[0]).hypot(o.position[1] - position[1]) > 4.0);
        if clear {
            objects.push(WorldObject { class, size, position, yaw, velocity });
        }
    }

    let scene_id = format!("scene_{index:04}");
    let frames = (0..config.frames_per_scene)
        .map(|t| {
            let time = t as f64 * config.frame_interval;
            let heading = ego_yaw_rate * time;
            let (ex, ey) = if ego_yaw_rate.abs() < 1e-9 {
                (ego_speed * time, 0.0)
            } else {
                let r = ego_speed / ego_yaw_rate;
                (r * heading.sin(), r * (1.0 - heading.cos()))
            };
            let ego_pose = Pose::from_yaw(heading, Vector3::new(ex, ey, 0.0));
            // only objects inside the annotated region exist for the sensors
            let boxes: Vec<(ObjectClass, Box3D)> = objects
                .iter()
                .map(|o| (o.class, o.ego_box(&ego_pose, time)))
                .filter(|(_, b)| {
                    b.center[0].abs() < ext && b.center[1].abs() < ext && b.center[0].hypot(b.center[1]) > 3.0
                })
                .collect();
            let annotations = boxes
                .iter()
                .map(|(c, b)| Annotation { bbox: *b, class: *c, attribute: Attribute::from_velocity(b.velocity) })
                .collect();
            let mut cam_rng = ChaCha8Rng::seed_from_u64(sub_seed(scene_seed, t as u64, STREAM_CAMERA));
            let mut radar_rng = ChaCha8Rng::seed_from_u64(sub_seed(scene_seed, t as u64, STREAM_RADAR));
            let images = render_cameras(&boxes, rig, config, rain, night, &mut cam_rng);
            let radar = simulate_radar(&boxes, rig, config, &mut radar_rng);
            FrameRecord {
                frame_id: format!("{scene_id}_{t:02}"),
                timestamp: time,
                ego_pose,
                images,
                radar,
                annotations,
                rain,
                night,
            }
        })
        .collect();
    Scene { scene_id, frames }
}

/// Generates `n_scenes` scenes; the last `config.val_scenes` form the val split.
pub fn generate_dataset(config: &SceneConfig, rig: &SensorRig, grid: &BevGridSpec, n_scenes: usize) -> Result<SceneDataset> {
    config.validate()?;
    rig.validate()?;
    grid.validate()?;
    if config.val_scenes > n_scenes {
        return Err(Error::Config(format!("val_scenes {} exceeds scene count {n_scenes}", config.val_scenes)));
    }
    let scenes: Vec<Scene> = (0..n_scenes).map(|i| generate_scene(config, rig, i)).collect();
    let splits = (0..n_scenes)
        .map(|i| if i + config.val_scenes >= n_scenes { Split::Val } else { Split::Train })
        .collect();
    Ok(SceneDataset { scenes, splits, rig: rig.clone(), grid: *grid, config: config.clone() })
}

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_convex(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    if hull.len() < 3 {
        return false;
    }
    (0..hull.len()).all(|k| {
        let (a, b) = (hull[k], hull[(k + 1) % hull.len()]);
        (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0
    })
}

/// Projects every corner into the camera; `None` if any corner is behind it.
fn project_corners(b: &Box3D, cam: &CameraSpec) -> Option<Vec<(f64, f64)>> {
    let k = &cam.intrinsics;
    b.corners()
        .iter()
        .map(|c| {
            let pc = cam.extrinsics.apply(&Vector3::new(c[0], c[1], c[2]));
            (pc.z > 0.1).then(|| (k[(0, 0)] * pc.x / pc.z + k[(0, 2)], k[(1, 1)] * pc.y / pc.z + k[(1, 2)]))
        })
        .collect()
}

/// Renders every camera. Objects are painted far to near as filled convex
/// hulls of their projected corners, shaded by distance.
pub fn render_cameras<R: Rng>(
    boxes: &[(ObjectClass, Box3D)],
    rig: &SensorRig,
    config: &SceneConfig,
    rain: bool,
    night: bool,
    rng: &mut R,
) -> Vec<CameraImage> {
    let noise = Normal::new(0.0, config.rain_noise.max(1e-12)).expect("valid sigma");
    rig.cameras
        .iter()
        .map(|cam| {
            let (w, h) = (cam.width, cam.height);
            let mut px: Vec<f64> = BACKGROUND.iter().copied().cycle().take(w * h * 3).collect();
            let mut order: Vec<(f64, usize)> = boxes
                .iter()
                .enumerate()
                .map(|(i, (_, b))| (-(b.center[0].hypot(b.center[1])), i))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(neg_d, i) in &order {
                let (class, b) = &boxes[i];
                let Some(corners) = project_corners(b, cam) else { continue };
                let hull = convex_hull(corners);
                if hull.len() < 3 {
                    continue;
                }
                let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
                for &(x, y) in &hull {
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
                if x1 < 0.0 || y1 < 0.0 || x0 >= w as f64 || y0 >= h as f64 {
                    continue;
                }
                let shade = 1.0 - 0.5 * (-neg_d / 50.0).min(1.0);
                let color = class_color(*class).map(|c| c * shade);
                let (xa, xb) = (x0.max(0.0).floor() as usize, (x1.ceil() as usize).min(w));
                let (ya, yb) = (y0.max(0.0).floor() as usize, (y1.ceil() as usize).min(h));
                for y in ya..yb {
                    for x in xa..xb {
                        if inside_convex(&hull, (x as f64 + 0.5, y as f64 + 0.5)) {
                            px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
                        }
                    }
                }
            }
            if night {
                px.iter_mut().for_each(|p| *p *= config.night_brightness);
            }
            if rain {
                let mean = px.iter().sum::<f64>() / px.len() as f64;
                for p in px.iter_mut() {
                    *p = mean + config.rain_contrast * (*p - mean);
                    if config.rain_noise > 0.0 {
                        *p += noise.sample(rng);
                    }
                }
            }
            CameraImage {
                width: w,
                height: h,
                data: px.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
            }
        })
        .collect()
}

/// Simulates every radar. Points are sampled on the footprint edges facing
/// the sensor at the box's mid height; weather is not an input.
pub fn simulate_radar<R: Rng>(
    boxes: &[(ObjectClass, Box3D)],
    rig: &SensorRig,
    config: &SceneConfig,
    rng: &mut R,
) -> PointCloudSet {
    let half_fov = config.radar_fov_deg.to_radians() / 2.0;
    let noise = Normal::new(0.0, config.radar_noise.max(1e-12)).expect("valid sigma");
    let rcs_noise = Normal::new(0.0, 1.0).expect("valid sigma");
    let mut out = PointCloudSet::empty(rig.radar_poses.len());
    for (s, pose) in rig.radar_poses.iter().enumerate() {
        let inv = pose.inverse();
        let origin = pose.translation;
        for (class, b) in boxes {
            let local = inv.apply(&Vector3::new(b.center[0], b.center[1], b.center[2]));
            let range = local.x.hypot(local.y);
            if range > config.radar_range || local.y.atan2(local.x).abs() > half_fov {
                continue;
            }
            let fp = b.footprint();
            let mut edges = Vec::new();
            for k in 0..4 {
                let (a, c) = (fp[k], fp[(k + 1) % 4]);
                let mid = [(a[0] + c[0]) / 2.0, (a[1] + c[1]) / 2.0];
                // counter-clockwise corners: outward normal is (dy, -dx)
                let normal = [c[1] - a[1], -(c[0] - a[0])];
                let to_sensor = [origin.x - mid[0], origin.y - mid[1]];
                if normal[0] * to_sensor[0] + normal[1] * to_sensor[1] > 0.0 {
                    edges.push((a, c, (c[0] - a[0]).hypot(c[1] - a[1])));
                }
            }
            let perimeter: f64 = edges.iter().map(|e| e.2).sum();
            if perimeter <= 0.0 {
                continue;
            }
            for _ in 0..class_points(*class) {
                let mut along = rng.gen_range(0.0..perimeter);
                let dropped = rng.gen::<f64>() < config.radar_dropout;
                let mut p = [0.0; 2];
                for &(a, c, len) in &edges {
                    if along <= len {
                        let t = along / len;
                        p = [a[0] + t * (c[0] - a[0]), a[1] + t * (c[1] - a[1])];
                        break;
                    }
                    along -= len;
                }
                let mut ego = Vector3::new(p[0], p[1], b.center[2]);
                if config.radar_noise > 0.0 {
                    ego += Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
                }
                let rcs = class_cross_section(*class) + rcs_noise.sample(rng);
                if dropped {
                    continue;
                }
                let los = (ego - origin).normalize();
                let radial_velocity = b.velocity[0] * los.x + b.velocity[1] * los.y;
                let sp = inv.apply(&ego);
                out.sensors[s].push(RadarPoint { position: [sp.x, sp.y, sp.z], radial_velocity, cross_section: rcs });
            }
        }
        for _ in 0..config.clutter_points {
            let r = rng.gen_range(2.0..config.radar_range.min(40.0).max(2.5));
            let az = rng.gen_range(-half_fov..half_fov);
            let z = rng.gen_range(0.0..2.0);
            let rcs = rng.gen_range(-10.0..5.0);
            out.sensors[s].push(RadarPoint {
                position: [r * az.cos(), r * az.sin(), z - origin.z],
                radial_velocity: 0.0,
                cross_section: rcs,
            });
        }
    }
    out
}
