//! BEV encoder: image backbone, BEV queries, temporal self-attention over the
//! ego-motion-aligned previous BEV, and spatial cross-attention into the
//! camera feature maps.
//!
//! Spatial cross-attention uses dense attention over a fixed set of sampling
//! points per cell instead of learned deformable offsets: every cell is lifted
//! to a pillar of reference heights, each reference point is projected into
//! every camera, and the feature maps are sampled bilinearly at the hits.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::Rng;

use crate::autodiff::{AttnGroup, ConvGeom, Graph, Mat, SparseRows, Var};
use crate::error::{Error, Result};
use crate::geometry::{project_to_image, BevGridSpec, Pose, SensorRig};
use crate::params::{ParamId, ParamStore};

/// Spatial downsampling of the image backbone.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Three 3x3 convolutions (stride 2, 2, 1) with ReLU between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBackbone {
    pub layers: Vec<ConvLayer>,
}

impl ImageBackbone {
    pub fn new<R: Rng>(store: &mut ParamStore, mid: usize, channels: usize, rng: &mut R) -> Self {
        let spec = [(3, mid, 2), (mid, channels, 2), (channels, channels, 1)];
        let layers = spec
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                let fan_in = 9 * cin;
                ConvLayer {
                    weight: store.add_normal(&format!("backbone.conv{i}.w"), fan_in, cout, (2.0 / fan_in as f64).sqrt(), rng),
                    bias: store.add_zeros(&format!("backbone.conv{i}.b"), 1, cout),
                    kernel: 3,
                    stride,
                    in_channels: cin,
                    out_channels: cout,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }
}

/// Multi-view feature maps stacked camera-major: rows
/// `[cam * fh * fw + y * fw + x]`, columns are channels.
#[derive(Debug, Clone, Copy)]
pub struct ImageFeatureSet {
    pub features: Var,
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
}

/// Runs the backbone on every camera. `images` holds one `(H*W) x 3`
/// channels-last map per camera with values in `[0, 1]`.
pub fn extract_image_features(
    g: &mut Graph,
    images: &[Var],
    height: usize,
    width: usize,
    backbone: &ImageBackbone,
) -> Result<ImageFeatureSet> {
    if images.is_empty() {
        return Err(Error::Shape("no camera images".into()));
    }
    if height % FEATURE_STRIDE != 0 || width % FEATURE_STRIDE != 0 {
        return Err(Error::Shape(format!("image size {height}x{width} not divisible by {FEATURE_STRIDE}")));
    }
    let mut per_cam = Vec::with_capacity(images.len());
    for &img in images {
        if g.value(img).shape() != (height * width, 3) {
            return Err(Error::Shape(format!(
                "image tensor {:?} does not match {height}x{width}x3",
                g.value(img).shape()
            )));
        }
        let (mut x, mut h, mut w) = (img, height, width);
        for (li, layer) in backbone.layers.iter().enumerate() {
            let geom = ConvGeom { in_h: h, in_w: w, channels: layer.in_channels, kernel: layer.kernel, stride: layer.stride, pad: 1 };
            let cols = g.im2col(x, geom);
            let (wt, b) = (g.p(layer.weight), g.p(layer.bias));
            x = g.linear(cols, wt, b);
            if li + 1 < backbone.layers.len() {
                x = g.relu(x);
            }
            h = geom.out_h();
            w = geom.out_w();
        }
        per_cam.push(x);
    }
    let features = if per_cam.len() == 1 { per_cam[0] } else { g.concat_rows(&per_cam) };
    Ok(ImageFeatureSet {
        features,
        cameras: images.len(),
        height: height / FEATURE_STRIDE,
        width: width / FEATURE_STRIDE,
    })
}

pub fn make_bev_queries(g: &mut Graph, radar_bev: Var, pos_embed: Var) -> Result<Var> {
    if g.value(radar_bev).shape() != g.value(pos_embed).shape() {
        return Err(Error::Shape(format!(
            "radar BEV {:?} vs positional embedding {:?}",
            g.value(radar_bev).shape(),
            g.value(pos_embed).shape()
        )));
    }
    Ok(g.add(radar_bev, pos_embed))
}

/// Resamples the previous BEV into the current ego frame. `ego_motion` is the
/// pose of the current ego frame expressed in the previous one, so a cell
/// center `p` of the current grid sits at `ego_motion.apply(p)` in the
/// previous grid. Samples are bilinear; neighbours outside the previous grid
/// contribute zero.
pub fn align_prev_bev(prev: &Mat, ego_motion: &Pose, grid: &BevGridSpec) -> Result<Mat> {
    ego_motion.validate()?;
    let r = &ego_motion.rotation;
    if (r[(2, 2)] - 1.0).abs() > 1e-9 || ego_motion.translation.z.abs() > 1e-9 {
        return Err(Error::InvalidPose("ego motion must be planar".into()));
    }
    if prev.rows != grid.cells() {
        return Err(Error::Shape(format!("previous BEV has {} rows, grid has {} cells", prev.rows, grid.cells())));
    }
    Ok(bev_warp_map(ego_motion, grid).apply(prev))
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Sparse bilinear resampling map for [`align_prev_bev`].
pub fn bev_warp_map(ego_motion: &Pose, grid: &BevGridSpec) -> SparseRows {
    let mut map = SparseRows::new(grid.cells(), grid.cells());
    for i in 0..grid.x {
        for j in 0..grid.y {
            let (x, y) = grid.cell_center(i, j);
            let p = ego_motion.apply(&Vector3::new(x, y, 0.0));
            let (ci, cj) = grid.continuous_index(p.x, p.y);
            let (fi, fj) = (snap(ci - 0.5), snap(cj - 0.5));
            let (i0, j0) = (fi.floor(), fj.floor());
            let (ti, tj) = (fi - i0, fj - j0);
            let ents = &mut map.entries[grid.flat(i, j)];
            for (di, wi) in [(0.0, 1.0 - ti), (1.0, ti)] {
                for (dj, wj) in [(0.0, 1.0 - tj), (1.0, tj)] {
                    let w = wi * wj;
                    let (si, sj) = (i0 + di, j0 + dj);
                    if w == 0.0 || si < 0.0 || sj < 0.0 || si >= grid.x as f64 || sj >= grid.y as f64 {
                        continue;
                    }
                    ents.push((grid.flat(si as usize, sj as usize), w));
                }
            }
        }
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut R) -> Self {
        let std = 1.0 / (c as f64).sqrt();
        Self {
            wq: store.add_normal(&format!("{prefix}.wq"), c, c, std, rng),
            bq: store.add_zeros(&format!("{prefix}.bq"), 1, c),
            wk: store.add_normal(&format!("{prefix}.wk"), c, c, std, rng),
            bk: store.add_zeros(&format!("{prefix}.bk"), 1, c),
            wv: store.add_normal(&format!("{prefix}.wv"), c, c, std, rng),
            bv: store.add_zeros(&format!("{prefix}.bv"), 1, c),
            wo: store.add_normal(&format!("{prefix}.wo"), c, c, std, rng),
            bo: store.add_zeros(&format!("{prefix}.bo"), 1, c),
        }
    }

    pub fn ids(&self) -> [ParamId; 8] {
        [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]
    }
}

/// Intermediate values of an attention block, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// Residual output.
    pub out: Var,
    /// Output projection before the residual add (`None` when no cell attended).
    pub update: Option<Var>,
    /// The attention node; [`Graph::attention_weights`] reads its weights.
    pub attention: Option<Var>,
}

/// Each cell `p` attends over `{Q_p, prev_p}`, or `{Q_p, Q_p}` on the first frame.
pub fn temporal_self_attention(
    g: &mut Graph,
    queries: Var,
    aligned_prev: Option<Var>,
    params: &AttentionParams,
    heads: usize,
) -> AttentionOutput {
    let n = g.value(queries).rows;
    let (kv_src, groups): (Var, Vec<AttnGroup>) = match aligned_prev {
        Some(prev) => (
            g.concat_rows(&[queries, prev]),
            (0..n).map(|p| AttnGroup { query: p, keys: vec![p, n + p] }).collect(),
        ),
        None => (queries, (0..n).map(|p| AttnGroup { query: p, keys: vec![p, p] }).collect()),
    };
    let q = g.linear(queries, g.p(params.wq), g.p(params.bq));
    let k = g.linear(kv_src, g.p(params.wk), g.p(params.bk));
    let v = g.linear(kv_src, g.p(params.wv), g.p(params.bv));
    let attn = g.attention(q, k, v, Arc::new(groups), heads);
    let update = g.linear(attn, g.p(params.wo), g.p(params.bo));
    let out = g.add(queries, update);
    AttentionOutput { out, update: Some(update), attention: Some(attn) }
}

/// Precomputed projection of pillar reference points into the cameras.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    /// Bilinear samples from the stacked feature maps.
    pub samples: Arc<SparseRows>,
    /// One group per (cell, camera) pair with at least one hit.
    pub groups: Arc<Vec<AttnGroup>>,
    /// Averages group outputs over cameras into the compact list of hit cells.
    pub camera_mean: Arc<SparseRows>,
    /// Scatters hit cells back into the full grid.
    pub scatter: Arc<SparseRows>,
    pub hit_cells: Vec<usize>,
}

impl SamplingPlan {
    pub fn new(rig: &SensorRig, grid: &BevGridSpec, heights: &[f64], feat_h: usize, feat_w: usize) -> Self {
        let per_cam = feat_h * feat_w;
        let mut sample_rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut groups = Vec::new();
        let mut hit_cells = Vec::new();
        let mut cam_groups: Vec<Vec<usize>> = Vec::new();
        for i in 0..grid.x {
            for j in 0..grid.y {
                let cell = grid.flat(i, j);
                let (x, y) = grid.cell_center(i, j);
                let mut this_cell = Vec::new();
                for (ci, cam) in rig.cameras.iter().enumerate() {
                    let mut keys = Vec::new();
                    for &z in heights {
                        let Some((u, v)) = project_to_image(&Vector3::new(x, y, z), cam) else { continue };
                        let fu = ((u / cam.width as f64) * feat_w as f64 - 0.5).clamp(0.0, (feat_w - 1) as f64);
                        let fv = ((v / cam.height as f64) * feat_h as f64 - 0.5).clamp(0.0, (feat_h - 1) as f64);
                        let (x0, y0) = (fu.floor() as usize, fv.floor() as usize);
                        let (x1, y1) = ((x0 + 1).min(feat_w - 1), (y0 + 1).min(feat_h - 1));
                        let (tx, ty) = (fu - x0 as f64, fv - y0 as f64);
                        let base = ci * per_cam;
                        let ents = vec![
                            (base + y0 * feat_w + x0, (1.0 - tx) * (1.0 - ty)),
                            (base + y0 * feat_w + x1, tx * (1.0 - ty)),
                            (base + y1 * feat_w + x0, (1.0 - tx) * ty),
                            (base + y1 * feat_w + x1, tx * ty),
                        ];
                        keys.push(sample_rows.len());
                        sample_rows.push(ents.into_iter().filter(|e| e.1 != 0.0).collect());
                    }
                    if !keys.is_empty() {
                        this_cell.push(groups.len());
                        groups.push(AttnGroup { query: cell, keys });
                    }
                }
                if !this_cell.is_empty() {
                    hit_cells.push(cell);
                    cam_groups.push(this_cell);
                }
            }
        }
        let n_feat = rig.cameras.len() * per_cam;
        let samples = SparseRows { in_rows: n_feat, entries: sample_rows };
        let mut camera_mean = SparseRows::new(groups.len(), hit_cells.len());
        for (h, gs) in cam_groups.iter().enumerate() {
            let w = 1.0 / gs.len() as f64;
            camera_mean.entries[h] = gs.iter().map(|&gi| (gi, w)).collect();
        }
        let mut scatter = SparseRows::new(hit_cells.len(), grid.cells());
        for (h, &cell) in hit_cells.iter().enumerate() {
            scatter.entries[cell].push((h, 1.0));
        }
        Self {
            samples: Arc::new(samples),
            groups: Arc::new(groups),
            camera_mean: Arc::new(camera_mean),
            scatter: Arc::new(scatter),
            hit_cells,
        }
    }
}

/// Cells with no camera hit pass through unchanged.
pub fn spatial_cross_attention(
    g: &mut Graph,
    bev: Var,
    feats: &ImageFeatureSet,
    plan: &SamplingPlan,
    params: &AttentionParams,
    heads: usize,
) -> AttentionOutput {
    if plan.hit_cells.is_empty() {
        return AttentionOutput { out: bev, update: None, attention: None };
    }
    let sampled = g.sparse(feats.features, plan.samples.clone());
    let q = g.linear(bev, g.p(params.wq), g.p(params.bq));
    let k = g.linear(sampled, g.p(params.wk), g.p(params.bk));
    let v = g.linear(sampled, g.p(params.wv), g.p(params.bv));
    let attn = g.attention(q, k, v, plan.groups.clone(), heads);
    let mean = g.sparse(attn, plan.camera_mean.clone());
    let proj = g.linear(mean, g.p(params.wo), g.p(params.bo));
    let update = g.sparse(proj, plan.scatter.clone());
    let out = g.add(bev, update);
    AttentionOutput { out, update: Some(update), attention: Some(attn) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, c: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add_normal(&format!("{prefix}.w1"), c, hidden, (2.0 / c as f64).sqrt(), rng),
            b1: store.add_zeros(&format!("{prefix}.b1"), 1, hidden),
            w2: store.add_normal(&format!("{prefix}.w2"), hidden, c, 1.0 / (hidden as f64).sqrt(), rng),
            b2: store.add_zeros(&format!("{prefix}.b2"), 1, c),
        }
    }

    /// `x + relu(x W1 + b1) W2 + b2`
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.linear(x, g.p(self.w1), g.p(self.b1));
        let h = g.relu(h);
        let y = g.linear(h, g.p(self.w2), g.p(self.b2));
        g.add(x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayer {
    pub temporal: AttentionParams,
    pub spatial: AttentionParams,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, index: usize, c: usize, rng: &mut R) -> Self {
        Self {
            temporal: AttentionParams::new(store, &format!("attention.{index}.temporal"), c, rng),
            spatial: AttentionParams::new(store, &format!("attention.{index}.spatial"), c, rng),
            ffn: FeedForward::new(store, &format!("ffn.{index}"), c, 2 * c, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        aligned_prev: Option<Var>,
        feats: &ImageFeatureSet,
        plan: &SamplingPlan,
        heads: usize,
    ) -> Var {
        let t = temporal_self_attention(g, x, aligned_prev, &self.temporal, heads).out;
        let s = spatial_cross_attention(g, t, feats, plan, &self.spatial, heads).out;
        self.ffn.forward(g, s)
    }
}

/// Runs the encoder stack: the output of layer `l` is the query of layer `l+1`.
pub fn encode_layers(
    g: &mut Graph,
    queries: Var,
    aligned_prev: Option<Var>,
    feats: &ImageFeatureSet,
    plan: &SamplingPlan,
    layers: &[EncoderLayer],
    heads: usize,
) -> Var {
    layers
        .iter()
        .fold(queries, |x, layer| layer.forward(g, x, aligned_prev, feats, plan, heads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn eye(c: usize) -> Mat {
        let mut m = Mat::zeros(c, c);
        for i in 0..c {
            m.set(i, i, 1.0);
        }
        m
    }

    #[test]
    fn backbone_shape_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bb = ImageBackbone::new(&mut store, 16, 32, &mut rng);
        let mut g = Graph::new();
        g.bind(&store);
        let imgs: Vec<Var> = (0..4).map(|_| g.constant(Mat::zeros(64 * 64, 3))).collect();
        let f = extract_image_features(&mut g, &imgs, 64, 64, &bb).unwrap();
        assert_eq!(g.value(f.features).shape(), (4 * 16 * 16, 32));
        assert_eq!((f.height, f.width), (16, 16));
        assert!(g.value(f.features).data.iter().all(|v| *v == 0.0));

        let bad = g.constant(Mat::zeros(10, 3));
        assert!(matches!(extract_image_features(&mut g, &[bad], 64, 64, &bb), Err(Error::Shape(_))));
    }

    #[test]
    fn bev_queries_are_elementwise_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (rand_mat(&mut rng, 16, 4), rand_mat(&mut rng, 16, 4));
        let mut g = Graph::new();
        let (va, vb, z) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(Mat::zeros(16, 4)));
        let q = make_bev_queries(&mut g, z, vb).unwrap();
        assert_eq!(g.value(q), &b);
        let q = make_bev_queries(&mut g, va, z).unwrap();
        assert_eq!(g.value(q), &a);
        let q = make_bev_queries(&mut g, va, vb).unwrap();
        for k in 0..a.data.len() {
            assert_eq!(g.value(q).data[k], a.data[k] + b.data[k]);
        }
        let wrong = g.constant(Mat::zeros(15, 4));
        assert!(make_bev_queries(&mut g, va, wrong).is_err());
    }

    #[test]
    fn align_identity_and_one_cell_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = BevGridSpec::new(6, 6, 1.6).unwrap();
        let prev = rand_mat(&mut rng, 36, 3);
        assert_eq!(align_prev_bev(&prev, &Pose::identity(), &grid).unwrap(), prev);

        let fwd = Pose::from_translation(Vector3::new(grid.cell_size, 0.0, 0.0));
        let out = align_prev_bev(&prev, &fwd, &grid).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i + 1 < 6 { prev.row(grid.flat(i + 1, j)).to_vec() } else { vec![0.0; 3] };
                assert_eq!(out.row(grid.flat(i, j)), &expect[..]);
            }
        }
    }

    #[test]
    fn align_quarter_turn_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = BevGridSpec::new(8, 8, 1.0).unwrap();
        let prev = rand_mat(&mut rng, 64, 2);
        let rot = Pose::from_yaw(std::f64::consts::FRAC_PI_2, Vector3::zeros());
        let out = align_prev_bev(&prev, &rot, &grid).unwrap();
        // current (x, y) sits at (-y, x) in the previous frame
        for i in 0..8 {
            for j in 0..8 {
                let (pi, pj) = (7 - j, i);
                for c in 0..2 {
                    assert!((out.at(grid.flat(i, j), c) - prev.at(grid.flat(pi, pj), c)).abs() < 1e-6);
                }
            }
        }
        let tilted = Pose { rotation: *nalgebra::Rotation3::from_euler_angles(0.2, 0.0, 0.0).matrix(), translation: Vector3::zeros() };
        assert!(align_prev_bev(&prev, &tilted, &grid).is_err());
    }

    fn identity_attention(store: &mut ParamStore, c: usize, zero_qk: bool) -> AttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = AttentionParams::new(store, "a", c, &mut rng);
        store.set(p.wv, eye(c));
        store.set(p.wo, eye(c));
        if zero_qk {
            store.set(p.wq, Mat::zeros(c, c));
            store.set(p.wk, Mat::zeros(c, c));
        }
        p
    }

    #[test]
    fn temporal_attention_duplicate_keys_return_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = identity_attention(&mut store, 4, false);
        let mut g = Graph::new();
        g.bind(&store);
        let q = g.constant(rand_mat(&mut rng, 9, 4));
        let out = temporal_self_attention(&mut g, q, None, &p, 1);
        assert!(g.value(out.update.unwrap()).max_abs_diff(g.value(q)) < 1e-12);
    }

    #[test]
    fn temporal_attention_uniform_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let p = identity_attention(&mut store, 4, true);
        let mut g = Graph::new();
        g.bind(&store);
        let (m1, m2) = (rand_mat(&mut rng, 9, 4), rand_mat(&mut rng, 9, 4));
        let q = g.constant(m1.clone());
        let prev = g.constant(m2.clone());
        let out = temporal_self_attention(&mut g, q, Some(prev), &p, 2);
        let upd = g.value(out.update.unwrap());
        for k in 0..m1.data.len() {
            assert!((upd.data[k] - (m1.data[k] + m2.data[k]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_attention_passthrough_and_constant_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rig = SensorRig::default_rig();
        rig.cameras.truncate(1);
        let grid = BevGridSpec::new(8, 8, 1.6).unwrap();
        let plan = SamplingPlan::new(&rig, &grid, &[-1.0, 0.0, 1.0], 16, 16);
        assert!(!plan.hit_cells.is_empty() && plan.hit_cells.len() < 64);
        let mut store = ParamStore::new();
        let p = identity_attention(&mut store, 4, false);
        let mut g = Graph::new();
        g.bind(&store);
        let bev_m = rand_mat(&mut rng, 64, 4);
        let bev = g.constant(bev_m.clone());
        let feats = g.constant(Mat::filled(256, 4, 0.37));
        let fs = ImageFeatureSet { features: feats, cameras: 1, height: 16, width: 16 };
        let out = spatial_cross_attention(&mut g, bev, &fs, &plan, &p, 2);
        let (o, upd) = (g.value(out.out), g.value(out.update.unwrap()));
        for cell in 0..64 {
            if plan.hit_cells.contains(&cell) {
                assert!(upd.row(cell).iter().all(|v| (v - 0.37).abs() < 1e-12));
            } else {
                assert_eq!(o.row(cell), bev_m.row(cell));
            }
        }
    }
}
