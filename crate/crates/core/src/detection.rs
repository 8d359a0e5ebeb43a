//! Set-prediction detection head, rain/time-of-day context heads and losses.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph, Mat, Var};
use crate::geometry::BevGridSpec;
use crate::hungarian::hungarian_match;
use crate::params::{ParamId, ParamStore};
use crate::types::{wrap_angle, Annotation, Attribute, Box3D, Detection, ObjectClass};

/// Width of the box regression vector.
pub const BOX_DIM: usize = 10;
/// Object classes plus the trailing no-object class.
pub const NUM_LOGITS: usize = ObjectClass::COUNT + 1;
pub const NO_OBJECT: usize = ObjectClass::COUNT;

/// Height range covered by the sigmoid-encoded box center z (m).
const Z_MIN: f64 = -1.0;
const Z_MAX: f64 = 3.0;

/// Maps boxes to and from the regression space used by the head and the
/// L1 terms: `[cx, cy, cz, ln l, ln w, ln h, sin yaw, cos yaw, vx/s, vy/s]`
/// where `cx, cy, cz` are grid-relative in `[0, 1]` and `s` is the velocity scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub half_x: f64,
    pub half_y: f64,
    pub velocity_scale: f64,
}

impl BoxCoder {
    pub fn new(grid: &BevGridSpec, velocity_scale: f64) -> Self {
        Self { half_x: grid.half_extent_x(), half_y: grid.half_extent_y(), velocity_scale }
    }

    pub fn encode(&self, b: &Box3D) -> [f64; BOX_DIM] {
        let (s, c) = b.yaw.sin_cos();
        [
            (b.center[0] + self.half_x) / (2.0 * self.half_x),
            (b.center[1] + self.half_y) / (2.0 * self.half_y),
            (b.center[2] - Z_MIN) / (Z_MAX - Z_MIN),
            b.size[0].ln(),
            b.size[1].ln(),
            b.size[2].ln(),
            s,
            c,
            b.velocity[0] / self.velocity_scale,
            b.velocity[1] / self.velocity_scale,
        ]
    }

    /// Per-dimension weights of the box L1 so that center errors count in
    /// meters; without them position is drowned by the size and yaw terms.
    pub fn l1_weights(&self) -> [f64; BOX_DIM] {
        let mut w = [1.0; BOX_DIM];
        w[0] = 2.0 * self.half_x;
        w[1] = 2.0 * self.half_y;
        w[2] = Z_MAX - Z_MIN;
        w
    }

    pub fn decode(&self, e: &[f64]) -> Box3D {
        Box3D {
            center: [
                e[0] * 2.0 * self.half_x - self.half_x,
                e[1] * 2.0 * self.half_y - self.half_y,
                e[2] * (Z_MAX - Z_MIN) + Z_MIN,
            ],
            size: [e[3].exp(), e[4].exp(), e[5].exp()],
            yaw: wrap_angle(e[6].atan2(e[7])),
            velocity: [e[8] * self.velocity_scale, e[9] * self.velocity_scale],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    pub num_queries: usize,
    pub heads: usize,
    /// Width of the locality prior around each query's reference point, in
    /// grid-relative units.
    pub sigma: f64,
    pub queries: ParamId,
    /// Reference points in inverse-sigmoid space, `N_q x 2`.
    pub refs: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    pub box_w1: ParamId,
    pub box_b1: ParamId,
    pub box_w2: ParamId,
    pub box_b2: ParamId,
}

/// Raw head outputs for one frame.
#[derive(Debug, Clone, Copy)]
pub struct RawDetections {
    /// `N_q x (classes + 1)`
    pub class_logits: Var,
    /// `N_q x 10`, in [`BoxCoder`] space.
    pub boxes: Var,
}

impl DetectionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, c: usize, num_queries: usize, heads: usize, sigma: f64, rng: &mut R) -> Self {
        let std = 1.0 / (c as f64).sqrt();
        let cols = (num_queries as f64).sqrt().ceil() as usize;
        let rows = num_queries.div_ceil(cols);
        let mut refs = Mat::zeros(num_queries, 2);
        for q in 0..num_queries {
            let (a, b) = ((q / cols) as f64, (q % cols) as f64);
            let (ra, rb) = ((a + 0.5) / rows as f64, (b + 0.5) / cols as f64);
            refs.set(q, 0, (ra / (1.0 - ra)).ln());
            refs.set(q, 1, (rb / (1.0 - rb)).ln());
        }
        Self {
            num_queries,
            heads,
            sigma,
            queries: store.add_normal("head.queries", num_queries, c, 1.0, rng),
            refs: store.add("head.refs", refs),
            wq: store.add_normal("head.attn.wq", c, c, std, rng),
            bq: store.add_zeros("head.attn.bq", 1, c),
            wk: store.add_normal("head.attn.wk", c, c, std, rng),
            bk: store.add_zeros("head.attn.bk", 1, c),
            wv: store.add_normal("head.attn.wv", c, c, std, rng),
            bv: store.add_zeros("head.attn.bv", 1, c),
            wo: store.add_normal("head.attn.wo", c, c, std, rng),
            bo: store.add_zeros("head.attn.bo", 1, c),
            cls_w: store.add_normal("head.cls.w", c, NUM_LOGITS, std, rng),
            cls_b: store.add_zeros("head.cls.b", 1, NUM_LOGITS),
            box_w1: store.add_normal("head.box.w1", c, c, (2.0 / c as f64).sqrt(), rng),
            box_b1: store.add_zeros("head.box.b1", 1, c),
            box_w2: store.add_normal("head.box.w2", c, BOX_DIM, 0.1 * std, rng),
            box_b2: store.add_zeros("head.box.b2", 1, BOX_DIM),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.queries, self.refs, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.cls_w,
            self.cls_b, self.box_w1, self.box_b1, self.box_w2, self.box_b2,
        ]
    }

    /// One cross-attention layer from the object queries to all BEV cells.
    /// Attention logits carry a Gaussian locality prior around each query's
    /// reference point; the head-averaged attention map yields a soft-argmax
    /// anchor that the regressed center offset refines.
    pub fn decode_objects(&self, g: &mut Graph, bev: Var, cell_pos: &Arc<Mat>) -> RawDetections {
        let c = g.value(bev).cols;
        let d = c / self.heads;
        let queries = g.p(self.queries);
        let q = g.linear(queries, g.p(self.wq), g.p(self.bq));
        let k = g.linear(bev, g.p(self.wk), g.p(self.bk));
        let v = g.linear(bev, g.p(self.wv), g.p(self.bv));
        let refs = g.p(self.refs);
        let refs = g.sigmoid(refs);
        let dist = g.sq_dist(refs, cell_pos.clone());
        let prior = g.scale(dist, -1.0 / (2.0 * self.sigma * self.sigma));
        let mut outs = Vec::with_capacity(self.heads);
        let mut attn_sum: Option<Var> = None;
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * d, d);
            let kh = g.slice_cols(k, h * d, d);
            let vh = g.slice_cols(v, h * d, d);
            let logits = g.matmul_bt(qh, kh);
            let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
            let logits = g.add(logits, prior);
            let a = g.softmax_rows(logits);
            outs.push(g.matmul(a, vh));
            attn_sum = Some(match attn_sum {
                Some(s) => g.add(s, a),
                None => a,
            });
        }
        let attn = g.concat_cols(&outs);
        let attn_mean = g.scale(attn_sum.expect("at least one head"), 1.0 / self.heads as f64);
        let pos = g.constant((**cell_pos).clone());
        let anchor = g.matmul(attn_mean, pos);

        let proj = g.linear(attn, g.p(self.wo), g.p(self.bo));
        let hidden = g.add(queries, proj);
        let class_logits = g.linear(hidden, g.p(self.cls_w), g.p(self.cls_b));
        let bh = g.linear(hidden, g.p(self.box_w1), g.p(self.box_b1));
        let bh = g.relu(bh);
        let raw = g.linear(bh, g.p(self.box_w2), g.p(self.box_b2));

        let offset = g.slice_cols(raw, 0, 2);
        let anchor_logit = g.logit(anchor);
        let center = g.add(anchor_logit, offset);
        let center = g.sigmoid(center);
        let z = g.slice_cols(raw, 2, 1);
        let z = g.sigmoid(z);
        let rest = g.slice_cols(raw, 3, BOX_DIM - 3);
        let boxes = g.concat_cols(&[center, z, rest]);
        RawDetections { class_logits, boxes }
    }
}

/// Grid-relative `(x, y)` of every cell center, `(X*Y) x 2`.
pub fn cell_positions(grid: &BevGridSpec) -> Mat {
    let mut m = Mat::zeros(grid.cells(), 2);
    for i in 0..grid.x {
        for j in 0..grid.y {
            m.set(grid.flat(i, j), 0, (i as f64 + 0.5) / grid.x as f64);
            m.set(grid.flat(i, j), 1, (j as f64 + 0.5) / grid.y as f64);
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextHeads {
    pub rain_w: ParamId,
    pub rain_b: ParamId,
    pub night_w: ParamId,
    pub night_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct ContextPrediction {
    pub rain_logit: Var,
    pub night_logit: Var,
}

impl ContextHeads {
    pub fn new<R: Rng>(store: &mut ParamStore, c: usize, rng: &mut R) -> Self {
        let std = 1.0 / (c as f64).sqrt();
        Self {
            rain_w: store.add_normal("rain_head.w", c, 1, std, rng),
            rain_b: store.add_zeros("rain_head.b", 1, 1),
            night_w: store.add_normal("tod_head.w", c, 1, std, rng),
            night_b: store.add_zeros("tod_head.b", 1, 1),
        }
    }

    /// Global average pool followed by two independent linear maps.
    pub fn predict_context(&self, g: &mut Graph, bev: Var) -> ContextPrediction {
        let pooled = g.mean_rows(bev);
        let rain_logit = g.linear(pooled, g.p(self.rain_w), g.p(self.rain_b));
        let night_logit = g.linear(pooled, g.p(self.night_w), g.p(self.night_b));
        ContextPrediction { rain_logit, night_logit }
    }
}

/// `-y ln s(x) - (1-y) ln(1 - s(x))`
pub fn binary_ce(logit: f64, label: bool) -> f64 {
    if label {
        softplus(-logit)
    } else {
        softplus(logit)
    }
}

pub fn binary_ce_var(g: &mut Graph, logit: Var, label: bool) -> Var {
    let x = if label { g.scale(logit, -1.0) } else { logit };
    let sp = g.softplus(x);
    g.sum(sp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub bbox: f64,
    /// Relative weight of no-object targets in the classification mean.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, bbox: 5.0, no_object: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_rain: f64,
    pub l_tod: f64,
    pub l_joint: f64,
}

pub fn joint_loss(l_det: f64, l_rain: f64, l_tod: f64) -> LossBreakdown {
    LossBreakdown { l_det, l_rain, l_tod, l_joint: l_det + l_rain + l_tod }
}

/// Matching cost `w_cls * -ln p(class) + w_box * L1(box)` for every
/// (query, annotation) pair; `dims` weights each box dimension.
pub fn match_cost(
    log_probs: &Mat,
    boxes: &Mat,
    targets: &[(usize, [f64; BOX_DIM])],
    w: &LossWeights,
    dims: &[f64; BOX_DIM],
) -> Mat {
    let mut cost = Mat::zeros(log_probs.rows, targets.len());
    for q in 0..log_probs.rows {
        for (k, (cls, t)) in targets.iter().enumerate() {
            let l1: f64 = boxes.row(q).iter().zip(t).zip(dims).map(|((a, b), d)| d * (a - b).abs()).sum();
            cost.set(q, k, -w.cls * log_probs.at(q, *cls) + w.bbox * l1);
        }
    }
    cost
}

/// Set-to-set detection loss.
///
/// Queries are matched one-to-one to annotations by [`hungarian_match`] on
/// [`match_cost`]. Classification is the weighted mean cross-entropy over all
/// queries (matched ones against their annotation's class, the rest against
/// no-object); the box term is the matched, dimension-weighted L1 sum
/// divided by `max(N_k, 1)`.
pub fn detection_loss(
    g: &mut Graph,
    raw: &RawDetections,
    annotations: &[Annotation],
    coder: &BoxCoder,
    w: &LossWeights,
) -> (Var, Vec<(usize, usize)>) {
    let log_probs = g.log_softmax_rows(raw.class_logits);
    let nq = g.value(log_probs).rows;
    let targets: Vec<(usize, [f64; BOX_DIM])> =
        annotations.iter().map(|a| (a.class.index(), coder.encode(&a.bbox))).collect();
    let dims = coder.l1_weights();
    let cost = match_cost(g.value(log_probs), g.value(raw.boxes), &targets, w, &dims);
    let pairs = hungarian_match(&cost);

    let mut target_class = vec![NO_OBJECT; nq];
    for &(q, k) in &pairs {
        target_class[q] = targets[k].0;
    }
    let weight = |c: usize| if c == NO_OBJECT { w.no_object } else { 1.0 };
    let total_w: f64 = target_class.iter().map(|&c| weight(c)).sum();
    let cls_entries: Vec<(usize, usize, f64)> =
        target_class.iter().enumerate().map(|(q, &c)| (q, c, -w.cls * weight(c) / total_w)).collect();
    let cls = g.pick(log_probs, Arc::new(cls_entries));
    if pairs.is_empty() {
        return (cls, pairs);
    }

    let mut tmat = Mat::zeros(nq, BOX_DIM);
    let norm = annotations.len().max(1) as f64;
    let mut box_entries = Vec::with_capacity(pairs.len() * BOX_DIM);
    for &(q, k) in &pairs {
        tmat.row_mut(q).copy_from_slice(&targets[k].1);
        for c in 0..BOX_DIM {
            box_entries.push((q, c, w.bbox * dims[c] / norm));
        }
    }
    let t = g.constant(tmat);
    let diff = g.sub(raw.boxes, t);
    let l1 = g.abs(diff);
    let bbox = g.pick(l1, Arc::new(box_entries));
    (g.add(cls, bbox), pairs)
}

/// Turns head outputs into scored detections, one per query.
pub fn to_detections(class_logits: &Mat, boxes: &Mat, coder: &BoxCoder) -> Vec<Detection> {
    (0..class_logits.rows)
        .map(|q| {
            let mut scores = class_logits.row(q).to_vec();
            crate::autodiff::softmax_in_place(&mut scores);
            let (best, conf) = scores[..ObjectClass::COUNT]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
            let bbox = coder.decode(boxes.row(q));
            Detection {
                bbox,
                class: ObjectClass::from_index(best).expect("class index"),
                confidence: conf,
                attribute: Attribute::from_velocity(bbox.velocity),
                scores,
            }
        })
        .collect()
}
