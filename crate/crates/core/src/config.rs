//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! one of [`KEYS`]; unknown or repeated keys are errors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, SensorRig};
use crate::synth::SceneConfig;
use crate::train::TrainConfig;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for scene generation and training (gen --seed overrides it for scenes)"),
    ("frames_per_scene", "frames per generated scene"),
    ("min_objects", "minimum objects per scene"),
    ("max_objects", "maximum objects per scene"),
    ("world_extent", "half-width in meters of the annotated square around the ego vehicle"),
    ("min_speed", "minimum object speed, m/s"),
    ("max_speed", "maximum object speed, m/s"),
    ("max_ego_speed", "maximum ego speed, m/s"),
    ("frame_interval", "seconds between frames"),
    ("rain_probability", "per-scene probability of rain"),
    ("night_probability", "per-scene probability of night"),
    ("rain_noise", "std of additive rain noise on [0, 1] pixel intensities"),
    ("rain_contrast", "rain contrast factor in (0, 1]"),
    ("night_brightness", "night brightness factor in (0, 1]"),
    ("radar_dropout", "probability of dropping each radar return"),
    ("radar_noise", "std of radar position noise, m"),
    ("clutter_points", "clutter returns per radar per frame"),
    ("radar_range", "radar range, m"),
    ("radar_fov_deg", "radar horizontal field of view, degrees"),
    ("val_scenes", "number of trailing scenes assigned to the val split"),
    ("image_size", "camera image width and height, pixels"),
    ("grid_x", "BEV cells along x"),
    ("grid_y", "BEV cells along y"),
    ("cell_size", "BEV cell size, m"),
    ("channels", "feature channels C"),
    ("capacity", "embedding table capacity K"),
    ("layers", "encoder layers"),
    ("heads", "attention heads"),
    ("num_queries", "object queries"),
    ("backbone_mid", "channels of the first image backbone stage"),
    ("pillar_heights", "comma-separated pillar reference heights, m"),
    ("decoder_sigma", "width of the decoder's reference-point prior, normalized units"),
    ("velocity_scale", "velocity regression scale, m/s per unit"),
    ("learning_rate", "step size"),
    ("steps", "number of updates"),
    ("batch_size", "consecutive frames of one scene per update"),
    ("optimizer", "sgd or adam"),
    ("with_rb", "feed the radar BEV into the queries (true/false)"),
    ("with_mtl", "train the rain and time-of-day heads (true/false)"),
    ("lambda_cls", "classification weight in matching and loss"),
    ("lambda_box", "box L1 weight in matching and loss"),
    ("no_object_weight", "weight of no-object targets in the classification mean"),
    ("grad_clip", "global gradient-norm clip, 0 disables"),
    ("early_stop", "stop on a smoothed-loss plateau (true/false)"),
    ("k_sweep", "comma-separated capacities for the ablation K sweep, empty disables"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub grid: BevGridSpec,
    pub image_size: usize,
    pub train: TrainConfig,
    pub k_sweep: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            grid: BevGridSpec::default(),
            image_size: 64,
            train: TrainConfig::default(),
            k_sweep: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn rig(&self) -> SensorRig {
        SensorRig::surround(4, std::f64::consts::FRAC_PI_2, self.image_size, self.image_size)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { path: path.to_path_buf(), message: format!("line {}: {msg}", n + 1) };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(err(format!("unknown key {key:?}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.validate().map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.grid.validate()?;
        if self.image_size < crate::encoder::FEATURE_STRIDE || self.image_size % crate::encoder::FEATURE_STRIDE != 0 {
            return Err(Error::Config(format!("image_size must be a positive multiple of {}", crate::encoder::FEATURE_STRIDE)));
        }
        let mut t = self.train.clone();
        t.model.grid = self.grid;
        t.validate()?;
        if self.k_sweep.contains(&0) {
            return Err(Error::Config("k_sweep capacities must be positive".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let s = &mut self.scene;
        let t = &mut self.train;
        match key {
            "seed" => {
                let seed = num(v)?;
                s.seed = seed;
                t.seed = seed;
            }
            "frames_per_scene" => s.frames_per_scene = num(v)?,
            "min_objects" => s.min_objects = num(v)?,
            "max_objects" => s.max_objects = num(v)?,
            "world_extent" => s.world_extent = num(v)?,
            "min_speed" => s.min_speed = num(v)?,
            "max_speed" => s.max_speed = num(v)?,
            "max_ego_speed" => s.max_ego_speed = num(v)?,
            "frame_interval" => s.frame_interval = num(v)?,
            "rain_probability" => s.rain_probability = num(v)?,
            "night_probability" => s.night_probability = num(v)?,
            "rain_noise" => s.rain_noise = num(v)?,
            "rain_contrast" => s.rain_contrast = num(v)?,
            "night_brightness" => s.night_brightness = num(v)?,
            "radar_dropout" => s.radar_dropout = num(v)?,
            "radar_noise" => s.radar_noise = num(v)?,
            "clutter_points" => s.clutter_points = num(v)?,
            "radar_range" => s.radar_range = num(v)?,
            "radar_fov_deg" => s.radar_fov_deg = num(v)?,
            "val_scenes" => s.val_scenes = num(v)?,
            "image_size" => self.image_size = num(v)?,
            "grid_x" => self.grid.x = num(v)?,
            "grid_y" => self.grid.y = num(v)?,
            "cell_size" => self.grid.cell_size = num(v)?,
            "channels" => t.model.channels = num(v)?,
            "capacity" => t.model.capacity = num(v)?,
            "layers" => t.model.layers = num(v)?,
            "heads" => t.model.heads = num(v)?,
            "num_queries" => t.model.num_queries = num(v)?,
            "backbone_mid" => t.model.backbone_mid = num(v)?,
            "pillar_heights" => t.model.pillar_heights = list(v)?,
            "decoder_sigma" => t.model.decoder_sigma = num(v)?,
            "velocity_scale" => t.model.velocity_scale = num(v)?,
            "learning_rate" => t.learning_rate = num(v)?,
            "steps" => t.steps = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "optimizer" => t.optimizer = v.parse().map_err(|e: Error| e.to_string())?,
            "with_rb" => t.with_rb = flag(v)?,
            "with_mtl" => t.with_mtl = flag(v)?,
            "lambda_cls" => t.loss.cls = num(v)?,
            "lambda_box" => t.loss.bbox = num(v)?,
            "no_object_weight" => t.loss.no_object = num(v)?,
            "grad_clip" => t.grad_clip = num(v)?,
            "early_stop" => t.early_stop = flag(v)?,
            "k_sweep" => self.k_sweep = list(v)?,
            _ => unreachable!("key list and setter disagree on {key}"),
        }
        Ok(())
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(x.trim())).collect()
}
