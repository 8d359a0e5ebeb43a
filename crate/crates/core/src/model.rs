//! Full detector: radar backbone, image backbone, BEV encoder stack, object
//! decoder and context heads.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::detection::{cell_positions, BoxCoder, ContextHeads, ContextPrediction, DetectionHead, RawDetections};
use crate::encoder::{
    align_prev_bev, encode_layers, extract_image_features, make_bev_queries, EncoderLayer, ImageBackbone,
    ImageFeatureSet, SamplingPlan, FEATURE_STRIDE,
};
use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, Pose, SensorRig};
use crate::params::{ParamId, ParamStore};
use crate::radar::{RadarBackbone, SaliencyGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub grid: BevGridSpec,
    /// Embedding table capacity `K`: counts above it share the last row.
    pub capacity: usize,
    pub layers: usize,
    pub heads: usize,
    pub pillar_heights: Vec<f64>,
    pub num_queries: usize,
    pub backbone_mid: usize,
    pub decoder_sigma: f64,
    pub velocity_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            grid: BevGridSpec::default(),
            capacity: 10,
            layers: 2,
            heads: 4,
            pillar_heights: vec![-1.0, 0.0, 1.0],
            num_queries: 20,
            backbone_mid: 16,
            decoder_sigma: 0.1,
            velocity_scale: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!("channels {} not divisible by heads {}", self.channels, self.heads)));
        }
        if self.capacity == 0 || self.layers == 0 || self.num_queries == 0 {
            return Err(Error::Config("capacity, layers and queries must be positive".into()));
        }
        if self.pillar_heights.is_empty() {
            return Err(Error::Config("at least one pillar height required".into()));
        }
        if !(self.decoder_sigma > 0.0 && self.velocity_scale > 0.0) {
            return Err(Error::Config("decoder sigma and velocity scale must be positive".into()));
        }
        Ok(())
    }
}

/// Sensor inputs of one frame.
#[derive(Debug, Clone)]
pub struct FrameInput {
    /// One `(H*W) x 3` map per camera, values in `[0, 1]`.
    pub images: Vec<Mat>,
    pub saliency: SaliencyGrid,
    /// Current ego pose expressed in the previous frame's ego frame.
    pub ego_motion: Option<Pose>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    /// Feed the radar BEV into the queries; when off the radar BEV is zero.
    pub with_rb: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { with_rb: true }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub bev: Var,
    pub detections: RawDetections,
    pub context: ContextPrediction,
    pub image_features: ImageFeatureSet,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub rig: SensorRig,
    pub store: ParamStore,
    pub radar: RadarBackbone,
    pub backbone: ImageBackbone,
    pub pos_embed: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub head: DetectionHead,
    pub context: ContextHeads,
    pub plan: Arc<SamplingPlan>,
    pub cell_pos: Arc<Mat>,
    pub coder: BoxCoder,
}

impl Model {
    /// Randomly initialised model; fully determined by `seed`.
    pub fn new(config: ModelConfig, rig: SensorRig, seed: u64) -> Result<Self> {
        config.validate()?;
        rig.validate()?;
        let cam = &rig.cameras[0];
        if rig.cameras.iter().any(|c| c.width != cam.width || c.height != cam.height) {
            return Err(Error::Config("all cameras must share one image size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let radar = RadarBackbone::new(&mut store, config.capacity, c, &mut rng);
        let pos_embed = store.add_normal("pos_embed", config.grid.cells(), c, 0.02, &mut rng);
        let backbone = ImageBackbone::new(&mut store, config.backbone_mid, c, &mut rng);
        let layers = (0..config.layers).map(|l| EncoderLayer::new(&mut store, l, c, &mut rng)).collect();
        let head = DetectionHead::new(&mut store, c, config.num_queries, config.heads, config.decoder_sigma, &mut rng);
        let context = ContextHeads::new(&mut store, c, &mut rng);
        let plan = SamplingPlan::new(
            &rig,
            &config.grid,
            &config.pillar_heights,
            cam.height / FEATURE_STRIDE,
            cam.width / FEATURE_STRIDE,
        );
        let coder = BoxCoder::new(&config.grid, config.velocity_scale);
        Ok(Self {
            cell_pos: Arc::new(cell_positions(&config.grid)),
            plan: Arc::new(plan),
            config,
            rig,
            store,
            radar,
            backbone,
            pos_embed,
            layers,
            head,
            context,
            coder,
        })
    }

    /// Rebuilds a model around stored parameters, checking the census.
    pub fn with_params(config: ModelConfig, rig: SensorRig, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, rig, 0)?;
        if model.store.census() != store.census() {
            return Err(Error::Data("parameter census does not match the model configuration".into()));
        }
        model.store = store;
        Ok(model)
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.rig.cameras[0].height, self.rig.cameras[0].width)
    }

    /// Radar BEV: gated embedding of the saliency grid, or zeros when radar is off.
    pub fn radar_bev(&self, g: &mut Graph, saliency: &SaliencyGrid, toggles: Toggles) -> Var {
        if toggles.with_rb {
            self.radar.forward(g, saliency)
        } else {
            g.constant(Mat::zeros(self.config.grid.cells(), self.config.channels))
        }
    }

    /// Forward pass of one frame. `prev_bev` is the encoder output of the
    /// previous frame of the same scene (treated as a constant).
    pub fn forward(
        &self,
        g: &mut Graph,
        input: &FrameInput,
        prev_bev: Option<&Mat>,
        toggles: Toggles,
    ) -> Result<ForwardOutput> {
        if g.is_empty() {
            g.bind(&self.store);
        }
        if input.images.len() != self.rig.cameras.len() {
            return Err(Error::Shape(format!(
                "{} images for {} cameras",
                input.images.len(),
                self.rig.cameras.len()
            )));
        }
        let grid = &self.config.grid;
        if input.saliency.x != grid.x || input.saliency.y != grid.y {
            return Err(Error::Shape("saliency grid does not match model grid".into()));
        }
        let (h, w) = self.image_size();
        let imgs: Vec<Var> = input.images.iter().map(|m| g.constant(m.clone())).collect();
        let feats = extract_image_features(g, &imgs, h, w, &self.backbone)?;
        let radar = self.radar_bev(g, &input.saliency, toggles);
        let pos = g.p(self.pos_embed);
        let queries = make_bev_queries(g, radar, pos)?;
        let aligned = match prev_bev {
            Some(prev) => {
                let motion = input.ego_motion.unwrap_or_else(Pose::identity);
                Some(g.constant(normalize_cells(align_prev_bev(prev, &motion, grid)?)))
            }
            None => None,
        };
        let bev = encode_layers(g, queries, aligned, &feats, &self.plan, &self.layers, self.config.heads);
        let detections = self.head.decode_objects(g, bev, &self.cell_pos);
        let context = self.context.predict_context(g, bev);
        Ok(ForwardOutput { bev, detections, context, image_features: feats })
    }
}

/// Zero-mean, unit-variance rescaling of every cell of a detached BEV. Keeps
/// the recurrent temporal input on a fixed scale however the encoder output
/// drifts during training. Cells outside the previous grid stay zero.
pub fn normalize_cells(mut bev: Mat) -> Mat {
    let c = bev.cols;
    for r in 0..bev.rows {
        let row = bev.row_mut(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
        if var < 1e-12 {
            row.iter_mut().for_each(|x| *x = 0.0);
            continue;
        }
        let inv = 1.0 / (var + 1e-5).sqrt();
        row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
    }
    bev
}
