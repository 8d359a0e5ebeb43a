//! Center-distance detection metrics: per-class AP, true-positive errors and
//! the composite detection score (NDS), with rain/night subset filtering.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{wrap_angle, Annotation, Detection, ObjectClass};

pub const SCHEMA_VERSION: u32 = 1;

/// Number of recall samples used to integrate the PR curve.
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub tp_threshold: f64,
    pub classes: Vec<ObjectClass>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { thresholds: vec![0.5, 1.0, 2.0, 4.0], tp_threshold: 2.0, classes: ObjectClass::ALL.to_vec() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds[0] <= 0.0 || self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("distance thresholds must be positive and strictly increasing".into()));
        }
        if !(self.tp_threshold > 0.0) {
            return Err(Error::Config("TP threshold must be positive".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("class list is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    Rain,
    Night,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::All, Subset::Rain, Subset::Night];

    pub fn name(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::Rain => "rain",
            Subset::Night => "night",
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Subset::All),
            "rain" => Ok(Subset::Rain),
            "night" => Ok(Subset::Night),
            _ => Err(Error::Config(format!("unknown subset {s:?} (expected all, rain or night)"))),
        }
    }
}

/// Serializes a boolean label as `0`/`1`; also reads `true`/`false`.
mod flag {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u8),
        Bool(bool),
    }

    pub fn serialize<S: Serializer>(v: &Option<bool>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_u8(*b as u8),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<bool>, D::Error> {
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Bool(b)) => Ok(Some(b)),
            Some(Raw::Int(0)) => Ok(Some(false)),
            Some(Raw::Int(1)) => Ok(Some(true)),
            Some(Raw::Int(n)) => Err(serde::de::Error::custom(format!("label must be 0 or 1, got {n}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtFrame {
    pub frame_id: String,
    #[serde(default, with = "flag", skip_serializing_if = "Option::is_none")]
    pub rain: Option<bool>,
    #[serde(default, with = "flag", skip_serializing_if = "Option::is_none")]
    pub night: Option<bool>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredFrame {
    pub frame_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    schema_version: u32,
    frames: Vec<T>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FramesFile<T> {
    Versioned(Versioned<T>),
    Bare(Vec<T>),
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<u32>,
}

fn parse_frames<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>> {
    let parse_err = |e: serde_json::Error| Error::Parse { path: path.to_path_buf(), message: e.to_string() };
    let value: serde_json::Value = serde_json::from_str(text).map_err(parse_err)?;
    if value.is_object() {
        let probe: VersionProbe = serde_json::from_value(value.clone()).map_err(parse_err)?;
        match probe.schema_version {
            Some(SCHEMA_VERSION) => {}
            found => {
                return Err(Error::SchemaVersion { path: path.to_path_buf(), expected: SCHEMA_VERSION, found })
            }
        }
    }
    // re-parse from text so errors carry line/column positions
    match serde_json::from_str::<FramesFile<T>>(text) {
        Ok(FramesFile::Versioned(v)) => Ok(v.frames),
        Ok(FramesFile::Bare(v)) => Ok(v),
        Err(_) if value.is_object() => serde_json::from_str::<Versioned<T>>(text).map(|v| v.frames).map_err(parse_err),
        Err(_) => serde_json::from_str::<Vec<T>>(text).map_err(parse_err),
    }
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>, path: &Path) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Parse { path: path.to_path_buf(), message: format!("duplicate frame_id {id:?}") });
        }
    }
    Ok(())
}

fn check_box(b: &crate::types::Box3D, frame: &str, path: &Path) -> Result<()> {
    if !b.is_valid() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("frame {frame:?}: box needs finite values and positive size"),
        });
    }
    Ok(())
}

pub fn parse_ground_truth(text: &str, path: &Path) -> Result<Vec<GtFrame>> {
    let frames: Vec<GtFrame> = parse_frames(text, path)?;
    check_unique(frames.iter().map(|f| f.frame_id.as_str()), path)?;
    for f in &frames {
        for a in &f.annotations {
            check_box(&a.bbox, &f.frame_id, path)?;
        }
    }
    Ok(frames)
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<PredFrame>> {
    let frames: Vec<PredFrame> = parse_frames(text, path)?;
    check_unique(frames.iter().map(|f| f.frame_id.as_str()), path)?;
    for f in &frames {
        for d in &f.detections {
            check_box(&d.bbox, &f.frame_id, path)?;
            if !d.confidence.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("frame {:?}: non-finite confidence", f.frame_id),
                });
            }
        }
    }
    Ok(frames)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GtFrame>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ground_truth(&text, path)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredFrame>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, path)
}

pub fn ground_truth_json(frames: &[GtFrame]) -> String {
    serde_json::to_string_pretty(&Versioned { schema_version: SCHEMA_VERSION, frames: frames.to_vec() })
        .expect("ground truth serializes")
}

pub fn predictions_json(frames: &[PredFrame]) -> String {
    serde_json::to_string_pretty(&Versioned { schema_version: SCHEMA_VERSION, frames: frames.to_vec() })
        .expect("predictions serialize")
}

pub fn write_json(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Result of greedy matching within one frame and class.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    /// One flag per prediction, in the order given.
    pub tp: Vec<bool>,
    /// `(prediction index, ground-truth index)`.
    pub pairs: Vec<(usize, usize)>,
}

fn center_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Confidence-descending order; ties keep input order.
pub fn confidence_order(confidences: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    order
}

/// Greedy matching of one frame's predictions of one class: highest
/// confidence first, each to the nearest unmatched ground truth within
/// `threshold` on the ground plane (ties go to the lower index).
pub fn match_detections(preds: &[Detection], gts: &[Annotation], threshold: f64) -> FrameMatch {
    let conf: Vec<f64> = preds.iter().map(|d| d.confidence).collect();
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; preds.len()];
    let mut pairs = Vec::new();
    for p in confidence_order(&conf) {
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in gts.iter().enumerate() {
            if taken[k] {
                continue;
            }
            let d = center_distance(&preds[p].bbox.center, &g.bbox.center);
            if d <= threshold && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        if let Some((k, _)) = best {
            taken[k] = true;
            tp[p] = true;
            pairs.push((p, k));
        }
    }
    FrameMatch { tp, pairs }
}

/// Area under the interpolated precision/recall curve sampled at 101 recall
/// levels. `tp` must already be sorted by descending confidence.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    // precision envelope: best precision at any recall at or beyond this point
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    let mut j = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while j < recall.len() && recall[j] < level - 1e-12 {
            j += 1;
        }
        if j < recall.len() {
            total += precision[j];
        }
    }
    total / RECALL_POINTS as f64
}

/// The five true-positive errors of one class, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TpErrors {
    /// Value used when a class has no matched pair.
    pub const WORST: TpErrors = TpErrors { ate: 1.0, ase: 1.0, aoe: 1.0, ave: 1.0, aae: 1.0 };

    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }
}

/// `1 - IoU` of two boxes sharing center and heading.
pub fn scale_error(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let union = a.iter().product::<f64>() + b.iter().product::<f64>() - inter;
    1.0 - inter / union
}

/// Smallest absolute heading difference, in `[0, pi]`.
pub fn yaw_error(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Mean per-pair errors over `(prediction, ground truth)` pairs.
pub fn tp_metrics(pairs: &[(&Detection, &Annotation)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::WORST;
    }
    let n = pairs.len() as f64;
    let mut e = TpErrors { ate: 0.0, ase: 0.0, aoe: 0.0, ave: 0.0, aae: 0.0 };
    for (d, g) in pairs {
        e.ate += center_distance(&d.bbox.center, &g.bbox.center);
        e.ase += scale_error(&d.bbox.size, &g.bbox.size);
        e.aoe += yaw_error(d.bbox.yaw, g.bbox.yaw);
        e.ave += (d.bbox.velocity[0] - g.bbox.velocity[0]).hypot(d.bbox.velocity[1] - g.bbox.velocity[1]);
        e.aae += (d.attribute != g.attribute) as u8 as f64;
    }
    TpErrors { ate: e.ate / n, ase: e.ase / n, aoe: e.aoe / n, ave: e.ave / n, aae: e.aae / n }
}

/// `0.5 * mAP + sum(0.1 * max(1 - mTP, 0))` over the five TP errors.
pub fn nds(map: f64, mtp: [f64; 5]) -> f64 {
    0.5 * map + mtp.iter().map(|e| 0.1 * (1.0 - e).max(0.0)).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// AP per distance threshold, in threshold order.
    pub ap: Vec<f64>,
    pub tp_errors: TpErrors,
    pub num_gt: usize,
    pub num_predictions: usize,
    pub num_matched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub subset: Subset,
    pub num_frames: usize,
    pub num_gt: usize,
    pub num_predictions: usize,
    /// True when the subset holds no frames; every score is then its worst value.
    pub empty: bool,
    pub thresholds: Vec<f64>,
    pub tp_threshold: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mATE")]
    pub mate: f64,
    #[serde(rename = "mASE")]
    pub mase: f64,
    #[serde(rename = "mAOE")]
    pub maoe: f64,
    #[serde(rename = "mAVE")]
    pub mave: f64,
    #[serde(rename = "mAAE")]
    pub maae: f64,
    #[serde(rename = "NDS")]
    pub nds: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablation: Vec<AblationRow>,
}

/// One row of an ablation table: a toggle combination and its scores per subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `modules` for the four toggle rows, `capacity` for the K sweep.
    pub table: String,
    pub with_rb: bool,
    pub with_mtl: bool,
    pub capacity: usize,
    /// Seeds the medians were taken over.
    pub seeds: Vec<u64>,
    /// Subset name to `{"NDS": median, "mAP": median}`.
    pub scores: BTreeMap<String, SubsetScores>,
    /// Per-seed NDS values, by subset.
    #[serde(default)]
    pub per_seed_nds: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetScores {
    #[serde(rename = "NDS")]
    pub nds: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

impl MetricsReport {
    pub fn mtp(&self) -> [f64; 5] {
        [self.mate, self.mase, self.maoe, self.mave, self.maae]
    }

    /// Report built from summary values only (no per-class detail).
    pub fn from_summary(map: f64, mtp: [f64; 5]) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            subset: Subset::All,
            num_frames: 0,
            num_gt: 0,
            num_predictions: 0,
            empty: false,
            thresholds: Vec::new(),
            tp_threshold: 0.0,
            per_class: BTreeMap::new(),
            map,
            mate: mtp[0],
            mase: mtp[1],
            maoe: mtp[2],
            mave: mtp[3],
            maae: mtp[4],
            nds: nds(map, mtp),
            ablation: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let r: MetricsReport =
            serde_json::from_str(text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                path: path.to_path_buf(),
                expected: SCHEMA_VERSION,
                found: Some(r.schema_version),
            });
        }
        Ok(r)
    }
}

/// Frames whose label matches the subset. Unlabeled frames are an error
/// for the rain and night subsets.
pub fn filter_subset(frames: &[GtFrame], subset: Subset) -> Result<Vec<GtFrame>> {
    let label = |f: &GtFrame| -> Result<bool> {
        let l = match subset {
            Subset::All => return Ok(true),
            Subset::Rain => f.rain,
            Subset::Night => f.night,
        };
        l.ok_or_else(|| Error::Data(format!("frame {:?} has no {} label", f.frame_id, subset.name())))
    };
    let mut out = Vec::new();
    for f in frames {
        if label(f)? {
            out.push(f.clone());
        }
    }
    Ok(out)
}

/// Full evaluation of predictions against the ground truth of one subset.
pub fn evaluate(preds: &[PredFrame], gts: &[GtFrame], config: &EvalConfig, subset: Subset) -> Result<MetricsReport> {
    config.validate()?;
    let known: HashSet<&str> = gts.iter().map(|f| f.frame_id.as_str()).collect();
    if let Some(p) = preds.iter().find(|p| !known.contains(p.frame_id.as_str())) {
        return Err(Error::Data(format!("prediction for unknown frame {:?}", p.frame_id)));
    }
    let frames = filter_subset(gts, subset)?;
    let by_id: HashMap<&str, &PredFrame> = preds.iter().map(|p| (p.frame_id.as_str(), p)).collect();
    let no_dets: Vec<Detection> = Vec::new();
    let frame_preds: Vec<&Vec<Detection>> =
        frames.iter().map(|f| by_id.get(f.frame_id.as_str()).map_or(&no_dets, |p| &p.detections)).collect();

    let mut per_class = BTreeMap::new();
    let (mut aps, mut tps) = (Vec::new(), Vec::new());
    let mut num_gt_total = 0;
    let mut num_pred_total = 0;
    for &class in &config.classes {
        let gts_c: Vec<Vec<Annotation>> =
            frames.iter().map(|f| f.annotations.iter().filter(|a| a.class == class).cloned().collect()).collect();
        let preds_c: Vec<Vec<Detection>> =
            frame_preds.iter().map(|d| d.iter().filter(|d| d.class == class).cloned().collect()).collect();
        let num_gt: usize = gts_c.iter().map(Vec::len).sum();
        let num_pred: usize = preds_c.iter().map(Vec::len).sum();
        num_gt_total += num_gt;
        num_pred_total += num_pred;
        if num_gt == 0 && num_pred == 0 {
            continue;
        }
        // pooled ranking over the split: (confidence, frame, index)
        let mut pooled: Vec<(f64, usize, usize)> = preds_c
            .iter()
            .enumerate()
            .flat_map(|(f, ds)| ds.iter().enumerate().map(move |(i, d)| (d.confidence, f, i)))
            .collect();
        pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut ap = Vec::with_capacity(config.thresholds.len());
        for &th in &config.thresholds {
            let matches: Vec<FrameMatch> =
                preds_c.iter().zip(&gts_c).map(|(p, g)| match_detections(p, g, th)).collect();
            let tp_seq: Vec<bool> = pooled.iter().map(|&(_, f, i)| matches[f].tp[i]).collect();
            ap.push(average_precision(&tp_seq, num_gt));
        }
        let mut pairs = Vec::new();
        for (p, g) in preds_c.iter().zip(&gts_c) {
            for (pi, gi) in match_detections(p, g, config.tp_threshold).pairs {
                pairs.push((&p[pi], &g[gi]));
            }
        }
        let tp_errors = tp_metrics(&pairs);
        aps.extend(ap.iter().copied());
        tps.push(tp_errors);
        per_class.insert(
            class.name().to_string(),
            ClassMetrics { ap, tp_errors, num_gt, num_predictions: num_pred, num_matched: pairs.len() },
        );
    }
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    let mtp: [f64; 5] = if tps.is_empty() {
        TpErrors::WORST.as_array()
    } else {
        std::array::from_fn(|k| tps.iter().map(|t| t.as_array()[k]).sum::<f64>() / tps.len() as f64)
    };
    Ok(MetricsReport {
        schema_version: SCHEMA_VERSION,
        subset,
        num_frames: frames.len(),
        num_gt: num_gt_total,
        num_predictions: num_pred_total,
        empty: frames.is_empty(),
        thresholds: config.thresholds.clone(),
        tp_threshold: config.tp_threshold,
        per_class,
        map,
        mate: mtp[0],
        mase: mtp[1],
        maoe: mtp[2],
        mave: mtp[3],
        maae: mtp[4],
        nds: nds(map, mtp),
        ablation: Vec::new(),
    })
}
