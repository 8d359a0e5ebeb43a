//! Training loop, inference over scenes, and the ablation harness.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat};
use crate::detection::{binary_ce_var, detection_loss, joint_loss, to_detections, LossBreakdown, LossWeights};
use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, SensorRig};
use crate::metrics::{evaluate, AblationRow, EvalConfig, MetricsReport, PredFrame, Subset, SubsetScores};
use crate::model::{FrameInput, Model, ModelConfig, Toggles};
use crate::radar::build_saliency;
use crate::synth::{FrameRecord, Scene, SceneDataset, Split};
use crate::dataset_io::scene_ground_truth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (expected sgd or adam)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Consecutive frames of one scene per update.
    pub batch_size: usize,
    pub seed: u64,
    pub with_rb: bool,
    pub with_mtl: bool,
    pub optimizer: Optimizer,
    pub loss: LossWeights,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Stop once the smoothed loss changes by less than 1e-4 (relative) over 50 steps.
    pub early_stop: bool,
    /// The grid is taken from the dataset at training time.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 2000,
            batch_size: 8,
            seed: 0,
            with_rb: true,
            with_mtl: true,
            optimizer: Optimizer::Sgd,
            loss: LossWeights::default(),
            grad_clip: 0.0,
            early_stop: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        self.model.validate()
    }

    pub fn toggles(&self) -> Toggles {
        Toggles { with_rb: self.with_rb }
    }
}

/// Model inputs of one frame; `prev` supplies the ego motion.
pub fn frame_input(frame: &FrameRecord, prev: Option<&FrameRecord>, rig: &SensorRig, grid: &BevGridSpec) -> Result<FrameInput> {
    Ok(FrameInput {
        images: frame.images.iter().map(|i| i.to_mat()).collect(),
        saliency: build_saliency(&frame.radar, rig, grid)?,
        ego_motion: prev.map(|p| frame.ego_motion_from(p)),
    })
}

#[derive(Debug, Clone)]
enum OptState {
    Sgd,
    Adam { m: Vec<Mat>, v: Vec<Mat>, t: i32 },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const SMOOTH_WINDOW: usize = 20;
const PLATEAU_SPAN: usize = 50;

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub step: usize,
    pub history: Vec<LossBreakdown>,
    opt: OptState,
}

impl Trainer {
    pub fn new(config: TrainConfig, rig: SensorRig, grid: BevGridSpec) -> Result<Self> {
        let mut config = config;
        config.model.grid = grid;
        config.validate()?;
        let mut model = Model::new(config.model.clone(), rig, config.seed)?;
        // disabled branches never receive updates
        let frozen: Vec<_> = model
            .store
            .ids()
            .filter(|&id| {
                let group = model.store.group(id);
                (!config.with_rb && group == "radar") || (!config.with_mtl && (group == "rain_head" || group == "tod_head"))
            })
            .collect();
        for id in frozen {
            model.store.set_frozen(id, true);
        }
        let opt = match config.optimizer {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam => {
                let zeros: Vec<Mat> = model.store.iter().map(|(_, p)| Mat::zeros(p.value.rows, p.value.cols)).collect();
                OptState::Adam { m: zeros.clone(), v: zeros, t: 0 }
            }
        };
        Ok(Self { model, config, step: 0, history: Vec::new(), opt })
    }

    /// Resumes from a checkpointed model, optimizer state starting fresh.
    pub fn from_model(model: Model, config: TrainConfig, step: usize, history: Vec<LossBreakdown>) -> Result<Self> {
        let mut t = Self::new(config, model.rig.clone(), model.config.grid)?;
        let frozen: Vec<_> = t.model.store.ids().filter(|&id| t.model.store.is_frozen(id)).collect();
        t.model.store = model.store;
        for id in frozen {
            t.model.store.set_frozen(id, true);
        }
        t.step = step;
        t.history = history;
        Ok(t)
    }

    /// Loss of one frame and the gradients of everything trainable.
    /// Returns the frame's BEV for the next frame.
    fn frame_loss(&self, input: &FrameInput, frame: &FrameRecord, prev_bev: Option<&Mat>) -> Result<(LossBreakdown, Vec<Option<Mat>>, Mat)> {
        let mut g = Graph::new();
        let out = self.model.forward(&mut g, input, prev_bev, self.config.toggles())?;
        let (l_det, _) = detection_loss(&mut g, &out.detections, &frame.annotations, &self.model.coder, &self.config.loss);
        let (loss, parts) = if self.config.with_mtl {
            let l_rain = binary_ce_var(&mut g, out.context.rain_logit, frame.rain);
            let l_tod = binary_ce_var(&mut g, out.context.night_logit, frame.night);
            let ctx = g.add(l_rain, l_tod);
            let total = g.add(l_det, ctx);
            (total, joint_loss(g.scalar(l_det), g.scalar(l_rain), g.scalar(l_tod)))
        } else {
            (l_det, joint_loss(g.scalar(l_det), 0.0, 0.0))
        };
        for (term, v) in [("l_det", parts.l_det), ("l_rain", parts.l_rain), ("l_tod", parts.l_tod), ("l_joint", parts.l_joint)] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term, step: self.step });
            }
        }
        let grads = g.backward(loss);
        let bev = g.value(out.bev).clone();
        Ok((parts, self.model.store.collect_grads(&g, &grads), bev))
    }

    /// One update on a clip of consecutive frames of one scene; the first
    /// frame of the clip starts without temporal context.
    pub fn train_clip(&mut self, frames: &[&FrameRecord]) -> Result<LossBreakdown> {
        let n = frames.len() as f64;
        let mut acc: Vec<Option<Mat>> = vec![None; self.model.store.len()];
        let mut sum = LossBreakdown { l_det: 0.0, l_rain: 0.0, l_tod: 0.0, l_joint: 0.0 };
        let mut prev_bev: Option<Mat> = None;
        for (i, frame) in frames.iter().enumerate() {
            let prev = if i > 0 { Some(frames[i - 1]) } else { None };
            let input = frame_input(frame, prev, &self.model.rig, &self.model.config.grid)?;
            let (parts, grads, bev) = self.frame_loss(&input, frame, prev_bev.as_ref())?;
            sum.l_det += parts.l_det / n;
            sum.l_rain += parts.l_rain / n;
            sum.l_tod += parts.l_tod / n;
            for (a, g) in acc.iter_mut().zip(grads) {
                if let Some(g) = g {
                    match a {
                        Some(a) => a.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y / n),
                        None => *a = Some(Mat::from_vec(g.rows, g.cols, g.data.iter().map(|y| y / n).collect())),
                    }
                }
            }
            prev_bev = Some(bev);
        }
        let losses = joint_loss(sum.l_det, sum.l_rain, sum.l_tod);
        self.apply(acc);
        if !self.model.store.all_finite() {
            return Err(Error::NonFiniteLoss { term: "parameters", step: self.step });
        }
        self.history.push(losses);
        self.step += 1;
        Ok(losses)
    }

    fn apply(&mut self, mut grads: Vec<Option<Mat>>) {
        if self.config.grad_clip > 0.0 {
            let norm = grads.iter().flatten().flat_map(|g| &g.data).map(|x| x * x).sum::<f64>().sqrt();
            if norm > self.config.grad_clip {
                let s = self.config.grad_clip / norm;
                grads.iter_mut().flatten().for_each(|g| g.data.iter_mut().for_each(|x| *x *= s));
            }
        }
        let lr = self.config.learning_rate;
        let ids: Vec<_> = self.model.store.ids().collect();
        if let OptState::Adam { t, .. } = &mut self.opt {
            *t += 1;
        }
        for id in ids {
            let Some(g) = &grads[id.0] else { continue };
            if self.model.store.is_frozen(id) {
                continue;
            }
            let mut value = self.model.store.get(id).clone();
            match &mut self.opt {
                OptState::Sgd => value.data.iter_mut().zip(&g.data).for_each(|(p, d)| *p -= lr * d),
                OptState::Adam { m, v, t } => {
                    let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(*t), 1.0 - ADAM_BETA2.powi(*t));
                    let (m, v) = (&mut m[id.0], &mut v[id.0]);
                    for k in 0..value.data.len() {
                        m.data[k] = ADAM_BETA1 * m.data[k] + (1.0 - ADAM_BETA1) * g.data[k];
                        v.data[k] = ADAM_BETA2 * v.data[k] + (1.0 - ADAM_BETA2) * g.data[k] * g.data[k];
                        value.data[k] -= lr * (m.data[k] / bc1) / ((v.data[k] / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
            self.model.store.set(id, value);
        }
    }

    /// Runs the configured step budget over the train split.
    pub fn fit(&mut self, dataset: &SceneDataset) -> Result<()> {
        let scenes: Vec<&Scene> = dataset.split(Split::Train).filter(|s| !s.frames.is_empty()).collect();
        if scenes.is_empty() {
            return Err(Error::EmptySplit("dataset has no non-empty train scenes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5EED_0F_7A1E);
        let mut order: Vec<usize> = Vec::new();
        while self.step < self.config.steps {
            if order.is_empty() {
                order = (0..scenes.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let scene = scenes[order.pop().expect("non-empty order")];
            let len = self.config.batch_size.min(scene.frames.len());
            let start = rng.gen_range(0..=scene.frames.len() - len);
            let clip: Vec<&FrameRecord> = scene.frames[start..start + len].iter().collect();
            self.train_clip(&clip)?;
            if self.config.early_stop && plateaued(&self.history) {
                break;
            }
        }
        Ok(())
    }
}

/// Trailing mean over `window` values ending at `end` (exclusive).
pub fn smoothed(values: &[f64], end: usize, window: usize) -> f64 {
    let xs = &values[end.saturating_sub(window)..end];
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn plateaued(history: &[LossBreakdown]) -> bool {
    let n = history.len();
    if n < PLATEAU_SPAN + SMOOTH_WINDOW {
        return false;
    }
    let joint: Vec<f64> = history.iter().map(|l| l.l_joint).collect();
    let now = smoothed(&joint, n, SMOOTH_WINDOW);
    let before = smoothed(&joint, n - PLATEAU_SPAN, SMOOTH_WINDOW);
    ((now - before) / before.abs().max(1e-12)).abs() < 1e-4
}

pub fn train(config: &TrainConfig, dataset: &SceneDataset) -> Result<Trainer> {
    let mut t = Trainer::new(config.clone(), dataset.rig.clone(), dataset.grid)?;
    t.fit(dataset)?;
    Ok(t)
}

/// Inference over a scene in temporal order, carrying the BEV between frames.
pub fn predict_scene(model: &Model, scene: &Scene, toggles: Toggles) -> Result<Vec<PredFrame>> {
    let mut prev_bev: Option<Mat> = None;
    let mut out = Vec::with_capacity(scene.frames.len());
    for (i, frame) in scene.frames.iter().enumerate() {
        let prev = if i > 0 { Some(&scene.frames[i - 1]) } else { None };
        let input = frame_input(frame, prev, &model.rig, &model.config.grid)?;
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &input, prev_bev.as_ref(), toggles)?;
        let dets = to_detections(g.value(fwd.detections.class_logits), g.value(fwd.detections.boxes), &model.coder);
        out.push(PredFrame { frame_id: frame.frame_id.clone(), detections: dets });
        prev_bev = Some(g.value(fwd.bev).clone());
    }
    Ok(out)
}

/// Predictions and ground truth for every scene of a split.
pub fn predict_split(model: &Model, dataset: &SceneDataset, split: Split, toggles: Toggles) -> Result<(Vec<PredFrame>, Vec<crate::metrics::GtFrame>)> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for scene in dataset.split(split) {
        preds.extend(predict_scene(model, scene, toggles)?);
        gts.extend(scene_ground_truth(scene));
    }
    Ok((preds, gts))
}

/// Metrics of a model on the val split for each requested subset.
pub fn evaluate_model(model: &Model, toggles: Toggles, dataset: &SceneDataset, subsets: &[Subset]) -> Result<Vec<MetricsReport>> {
    let (preds, gts) = predict_split(model, dataset, Split::Val, toggles)?;
    subsets.iter().map(|&s| evaluate(&preds, &gts, &EvalConfig::default(), s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationVariant {
    pub with_rb: bool,
    pub with_mtl: bool,
    pub capacity: usize,
}

impl AblationVariant {
    /// The four module combinations, full model first.
    pub fn module_grid(capacity: usize) -> [AblationVariant; 4] {
        [(true, true), (true, false), (false, true), (false, false)]
            .map(|(with_rb, with_mtl)| AblationVariant { with_rb, with_mtl, capacity })
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains and evaluates one variant per seed and summarises it as a table
/// row. Also returns the first seed's report on the full val split.
pub fn run_variant(
    base: &TrainConfig,
    dataset: &SceneDataset,
    variant: AblationVariant,
    seeds: &[u64],
    table: &str,
) -> Result<(AblationRow, MetricsReport)> {
    let mut first = None;
    let mut nds: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut map: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.with_rb = variant.with_rb;
        cfg.with_mtl = variant.with_mtl;
        cfg.model.capacity = variant.capacity;
        let trainer = train(&cfg, dataset)?;
        let reports = evaluate_model(&trainer.model, cfg.toggles(), dataset, &Subset::ALL)?;
        if first.is_none() {
            first = reports.iter().find(|r| r.subset == Subset::All).cloned();
        }
        for r in reports {
            nds.entry(r.subset.name().to_string()).or_default().push(r.nds);
            map.entry(r.subset.name().to_string()).or_default().push(r.map);
        }
    }
    let scores = nds
        .iter()
        .map(|(k, v)| (k.clone(), SubsetScores { nds: median(v), map: median(&map[k]) }))
        .collect();
    let row = AblationRow {
        table: table.to_string(),
        with_rb: variant.with_rb,
        with_mtl: variant.with_mtl,
        capacity: variant.capacity,
        seeds: seeds.to_vec(),
        scores,
        per_seed_nds: nds,
    };
    Ok((row, first.ok_or_else(|| Error::Config("at least one seed required".into()))?))
}

/// The four-row module ablation, optionally followed by a capacity sweep of
/// the full model. The returned report carries the full model's metrics
/// (first seed, all frames) with the table in its `ablation` array.
pub fn ablation_suite(base: &TrainConfig, dataset: &SceneDataset, seeds: &[u64], capacities: &[usize]) -> Result<MetricsReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed required".into()));
    }
    let mut rows = Vec::new();
    let mut report = None;
    for v in AblationVariant::module_grid(base.model.capacity) {
        let (row, r) = run_variant(base, dataset, v, seeds, "modules")?;
        report.get_or_insert(r);
        rows.push(row);
    }
    for &k in capacities {
        let v = AblationVariant { with_rb: true, with_mtl: true, capacity: k };
        rows.push(run_variant(base, dataset, v, seeds, "capacity")?.0);
    }
    let mut report = report.expect("module grid is non-empty");
    report.ablation = rows;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SceneConfig};

    fn tiny() -> (TrainConfig, SceneDataset) {
        let model = ModelConfig { channels: 8, heads: 2, layers: 1, num_queries: 8, backbone_mid: 4, ..ModelConfig::default() };
        let grid = BevGridSpec::new(8, 8, 6.4).unwrap();
        let cfg = TrainConfig { steps: 3, batch_size: 2, model, optimizer: Optimizer::Adam, ..TrainConfig::default() };
        let scene = SceneConfig { frames_per_scene: 2, val_scenes: 1, seed: 1, ..SceneConfig::default() };
        let ds = generate_dataset(&scene, &SensorRig::default_rig(), &grid, 3).unwrap();
        (cfg, ds)
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, ds) = tiny();
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.history.len(), 3);
    }

    #[test]
    fn disabled_branches_stay_fixed() {
        let (mut cfg, ds) = tiny();
        cfg.with_rb = false;
        cfg.with_mtl = false;
        let init = Trainer::new(cfg.clone(), ds.rig.clone(), ds.grid).unwrap().model.store;
        let t = train(&cfg, &ds).unwrap();
        for id in init.ids() {
            let group = init.group(id);
            let same = init.get(id) == t.model.store.get(id);
            if matches!(group, "radar" | "rain_head" | "tod_head") {
                assert!(same, "{} changed", init.name(id));
            }
        }
        assert!(t.history.iter().all(|l| l.l_rain == 0.0 && l.l_tod == 0.0 && l.l_joint == l.l_det));
    }

    #[test]
    fn one_step_moves_every_enabled_group() {
        let (mut cfg, ds) = tiny();
        cfg.steps = 1;
        let init = Trainer::new(cfg.clone(), ds.rig.clone(), ds.grid).unwrap().model.store;
        let t = train(&cfg, &ds).unwrap();
        for group in init.groups() {
            let moved = init.ids().filter(|&id| init.group(id) == group).any(|id| init.get(id) != t.model.store.get(id));
            assert!(moved, "group {group} did not move");
        }
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
