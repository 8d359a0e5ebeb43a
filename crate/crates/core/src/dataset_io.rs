//! On-disk dataset layout.
//!
//! ```text
//! DIR/index.json                      splits, rig, grid, scene config, frame list
//! DIR/<scene>/annotations.json        ground truth in the metrics schema
//! DIR/<scene>/<frame>_cam<k>.png      8-bit RGB
//! DIR/<scene>/<frame>_radar.csv       sensor_id,x,y,z,radial_velocity,cross_section
//! ```

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, Pose, SensorRig};
use crate::metrics::{self, GtFrame};
use crate::radar::{PointCloudSet, RadarPoint};
use crate::synth::{CameraImage, FrameRecord, Scene, SceneConfig, SceneDataset, Split};

pub const SCHEMA_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameEntry {
    frame_id: String,
    timestamp: f64,
    ego_pose: Pose,
    images: Vec<String>,
    radar: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneEntry {
    scene_id: String,
    split: Split,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Index {
    schema_version: u32,
    rig: SensorRig,
    grid: BevGridSpec,
    config: SceneConfig,
    scenes: Vec<SceneEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RadarRow {
    sensor_id: usize,
    x: f64,
    y: f64,
    z: f64,
    radial_velocity: f64,
    cross_section: f64,
}

fn parse_error(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Parse { path: path.to_path_buf(), message: message.to_string() }
}

pub fn encode_png(img: &CameraImage) -> Vec<u8> {
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone()).expect("buffer matches size");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn decode_png(bytes: &[u8], path: &Path) -> Result<CameraImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| parse_error(path, e))?;
    let rgb = img.to_rgb8();
    Ok(CameraImage { width: rgb.width() as usize, height: rgb.height() as usize, data: rgb.into_raw() })
}

fn write_radar_csv(path: &Path, clouds: &PointCloudSet) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(|e| csv_err(path, e))?;
    for (s, pts) in clouds.sensors.iter().enumerate() {
        for p in pts {
            w.serialize(RadarRow {
                sensor_id: s,
                x: p.position[0],
                y: p.position[1],
                z: p.position[2],
                radial_velocity: p.radial_velocity,
                cross_section: p.cross_section,
            })
            .map_err(|e| csv_err(path, e))?;
        }
    }
    // header row even for empty clouds
    if clouds.num_points() == 0 {
        w.write_record(["sensor_id", "x", "y", "z", "radial_velocity", "cross_section"]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        parse_error(path, e)
    }
}

pub fn read_radar_csv(path: &Path, n_sensors: usize) -> Result<PointCloudSet> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected = ["sensor_id", "x", "y", "z", "radial_velocity", "cross_section"];
    if headers.iter().ne(expected) {
        return Err(parse_error(path, format!("expected header {}", expected.join(","))));
    }
    let mut out = PointCloudSet::empty(n_sensors);
    for row in r.deserialize() {
        let row: RadarRow = row.map_err(|e| csv_err(path, e))?;
        let sensor = out
            .sensors
            .get_mut(row.sensor_id)
            .ok_or_else(|| parse_error(path, format!("sensor_id {} outside rig of {n_sensors}", row.sensor_id)))?;
        sensor.push(RadarPoint {
            position: [row.x, row.y, row.z],
            radial_velocity: row.radial_velocity,
            cross_section: row.cross_section,
        });
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Ground-truth frames of a scene in the metrics schema.
pub fn scene_ground_truth(scene: &Scene) -> Vec<GtFrame> {
    scene
        .frames
        .iter()
        .map(|f| GtFrame {
            frame_id: f.frame_id.clone(),
            rain: Some(f.rain),
            night: Some(f.night),
            annotations: f.annotations.clone(),
        })
        .collect()
}

pub fn write_dataset(ds: &SceneDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut scenes = Vec::with_capacity(ds.scenes.len());
    for (scene, split) in ds.scenes.iter().zip(&ds.splits) {
        let sdir = dir.join(&scene.scene_id);
        std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let mut frames = Vec::with_capacity(scene.frames.len());
        for f in &scene.frames {
            let mut images = Vec::with_capacity(f.images.len());
            for (k, img) in f.images.iter().enumerate() {
                let rel = format!("{}/{}_cam{k}.png", scene.scene_id, f.frame_id);
                write_file(&dir.join(&rel), &encode_png(img))?;
                images.push(rel);
            }
            let radar = format!("{}/{}_radar.csv", scene.scene_id, f.frame_id);
            write_radar_csv(&dir.join(&radar), &f.radar)?;
            frames.push(FrameEntry {
                frame_id: f.frame_id.clone(),
                timestamp: f.timestamp,
                ego_pose: f.ego_pose,
                images,
                radar,
            });
        }
        metrics::write_json(&sdir.join(ANNOTATIONS_FILE), &metrics::ground_truth_json(&scene_ground_truth(scene)))?;
        scenes.push(SceneEntry { scene_id: scene.scene_id.clone(), split: *split, frames });
    }
    let index = Index {
        schema_version: SCHEMA_VERSION,
        rig: ds.rig.clone(),
        grid: ds.grid,
        config: ds.config.clone(),
        scenes,
    };
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    write_file(&dir.join(INDEX_FILE), text.as_bytes())
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<u32>,
}

fn read_index(dir: &Path) -> Result<Index> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let probe: VersionProbe = serde_json::from_str(&text).map_err(|e| parse_error(&path, e))?;
    if probe.schema_version != Some(SCHEMA_VERSION) {
        return Err(Error::SchemaVersion { path, expected: SCHEMA_VERSION, found: probe.schema_version });
    }
    serde_json::from_str(&text).map_err(|e| parse_error(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<SceneDataset> {
    let index = read_index(dir)?;
    index.rig.validate()?;
    index.grid.validate()?;
    let mut scenes = Vec::with_capacity(index.scenes.len());
    let mut splits = Vec::with_capacity(index.scenes.len());
    let mut seen = std::collections::HashSet::new();
    for entry in &index.scenes {
        let ann_path = dir.join(&entry.scene_id).join(ANNOTATIONS_FILE);
        let gts = metrics::read_ground_truth(&ann_path)?;
        if gts.len() != entry.frames.len() {
            return Err(parse_error(&ann_path, format!("{} frames, index lists {}", gts.len(), entry.frames.len())));
        }
        let mut frames = Vec::with_capacity(entry.frames.len());
        let mut last_time = f64::NEG_INFINITY;
        for (fe, gt) in entry.frames.iter().zip(gts) {
            if gt.frame_id != fe.frame_id {
                return Err(parse_error(&ann_path, format!("frame {:?} where index lists {:?}", gt.frame_id, fe.frame_id)));
            }
            if !seen.insert(fe.frame_id.clone()) {
                return Err(parse_error(&dir.join(INDEX_FILE), format!("duplicate frame_id {:?}", fe.frame_id)));
            }
            if fe.timestamp <= last_time {
                return Err(parse_error(&dir.join(INDEX_FILE), format!("frame {:?} out of temporal order", fe.frame_id)));
            }
            last_time = fe.timestamp;
            let (Some(rain), Some(night)) = (gt.rain, gt.night) else {
                return Err(parse_error(&ann_path, format!("frame {:?} lacks rain/night labels", fe.frame_id)));
            };
            if fe.images.len() != index.rig.cameras.len() {
                return Err(parse_error(&dir.join(INDEX_FILE), format!("frame {:?}: wrong image count", fe.frame_id)));
            }
            let mut images = Vec::with_capacity(fe.images.len());
            for (rel, cam) in fe.images.iter().zip(&index.rig.cameras) {
                let path: PathBuf = dir.join(rel);
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let img = decode_png(&bytes, &path)?;
                if (img.width, img.height) != (cam.width, cam.height) {
                    return Err(parse_error(&path, format!("image is {}x{}, camera expects {}x{}", img.width, img.height, cam.width, cam.height)));
                }
                images.push(img);
            }
            let radar = read_radar_csv(&dir.join(&fe.radar), index.rig.radar_poses.len())?;
            frames.push(FrameRecord {
                frame_id: fe.frame_id.clone(),
                timestamp: fe.timestamp,
                ego_pose: fe.ego_pose,
                images,
                radar,
                annotations: gt.annotations,
                rain,
                night,
            });
        }
        scenes.push(Scene { scene_id: entry.scene_id.clone(), frames });
        splits.push(entry.split);
    }
    Ok(SceneDataset { scenes, splits, rig: index.rig, grid: index.grid, config: index.config })
}
