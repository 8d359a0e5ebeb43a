//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Every tensor in the model is a 2-D [`Mat`]: BEV maps are `(X*Y) x C`,
//! image feature maps are `(H*W) x C` (channels last), scalars are `1 x 1`.
//! A [`Graph`] records operations in creation order, so a single reversed
//! sweep in [`Graph::backward`] visits every node after all its consumers.

use std::sync::Arc;

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out = a * b`, `a: n x k`, `b: k x m`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    let mut out = Mat::zeros(a.rows, b.cols);
    matmul_acc(a, b, &mut out);
    out
}

// The dgemm calls below read exactly rows*cols elements of each operand with
// the given strides; the asserts pin those extents to the buffers.
fn check_gemm(a: &Mat, b: &Mat, out: &Mat, n: usize, k: usize, m: usize) {
    assert!(a.data.len() == n * k && b.data.len() == k * m && out.data.len() == n * m, "matmul shape mismatch");
}

fn matmul_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    // out (n x m) += a (n x k) * b (k x m)
    let (n, k, m) = (a.rows, a.cols, b.cols);
    check_gemm(a, b, out, n, k, m);
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0,
            a.data.as_ptr(), k as isize, 1,
            b.data.as_ptr(), m as isize, 1,
            1.0, out.data.as_mut_ptr(), m as isize, 1,
        );
    }
}

/// `out += a * b^T`, `a: n x k`, `b: m x k`.
fn matmul_bt_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    let (n, k, m) = (a.rows, a.cols, b.rows);
    check_gemm(a, b, out, n, k, m);
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0,
            a.data.as_ptr(), k as isize, 1,
            b.data.as_ptr(), 1, k as isize,
            1.0, out.data.as_mut_ptr(), m as isize, 1,
        );
    }
}

/// `out += a^T * b`, `a: k x n`, `b: k x m`.
fn matmul_at_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    let (k, n, m) = (a.rows, a.cols, b.cols);
    check_gemm(a, b, out, n, k, m);
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0,
            a.data.as_ptr(), 1, n as isize,
            b.data.as_ptr(), m as isize, 1,
            1.0, out.data.as_mut_ptr(), m as isize, 1,
        );
    }
}

/// A fixed sparse linear map between row spaces: output row `r` is
/// `sum_(src, w) w * input[src]`. Used for bilinear resampling, scatter and
/// group averaging, all of which are constant given the sensor geometry.
#[derive(Debug, Clone, Default)]
pub struct SparseRows {
    pub in_rows: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(in_rows: usize, out_rows: usize) -> Self {
        Self { in_rows, entries: vec![Vec::new(); out_rows] }
    }

    pub fn out_rows(&self) -> usize {
        self.entries.len()
    }

    pub fn apply(&self, input: &Mat) -> Mat {
        assert_eq!(input.rows, self.in_rows, "sparse map input rows mismatch");
        let mut out = Mat::zeros(self.entries.len(), input.cols);
        for (r, ents) in self.entries.iter().enumerate() {
            let orow = out.row_mut(r);
            for &(src, w) in ents {
                for (o, x) in orow.iter_mut().zip(&input.data[src * input.cols..(src + 1) * input.cols]) {
                    *o += w * x;
                }
            }
        }
        out
    }

    fn apply_transpose_acc(&self, grad_out: &Mat, grad_in: &mut Mat) {
        let c = grad_out.cols;
        for (r, ents) in self.entries.iter().enumerate() {
            let g = grad_out.row(r);
            for &(src, w) in ents {
                let dst = &mut grad_in.data[src * c..(src + 1) * c];
                for (d, x) in dst.iter_mut().zip(g) {
                    *d += w * x;
                }
            }
        }
    }
}

/// One attention group: a query row attending over a list of key/value rows.
#[derive(Debug, Clone)]
pub struct AttnGroup {
    pub query: usize,
    pub keys: Vec<usize>,
}

/// Geometry of a 2-D convolution expressed as im2col over a channels-last map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some(y as usize * self.in_w + x as usize)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    Softplus(Var),
    Logit(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Arc<Vec<usize>>),
    Sparse(Var, Arc<SparseRows>),
    Im2Col(Var, ConvGeom),
    MeanRows(Var),
    SumAll(Var),
    Pick(Var, Arc<Vec<(usize, usize, f64)>>),
    SqDist(Var, Arc<Mat>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: Arc<Vec<AttnGroup>>,
        heads: usize,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Binds every parameter of `store` as a differentiable leaf. Frozen
    /// parameters become constants.
    pub fn bind(&mut self, store: &ParamStore) {
        self.params = store
            .iter()
            .map(|(_, p)| {
                let m = p.value.clone();
                Some(if p.frozen { self.constant(m) } else { self.leaf(m) })
            })
            .collect();
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params
            .get(id.0)
            .copied()
            .flatten()
            .expect("parameter not bound to graph")
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "matmul_bt inner dimension mismatch");
        let mut out = Mat::zeros(av.rows, bv.rows);
        matmul_bt_acc(av, bv, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulBt(a, b), ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        Mat::from_vec(av.rows, av.cols, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows, 1, "bias must be a single row");
        assert_eq!(av.cols, bv.cols, "bias width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddRow(a, bias), ng)
    }

    /// `a * w + b`
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(a, w);
        self.add_row(h, b)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|x| f(*x)).collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    /// `ln(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    /// Inverse sigmoid with the argument clamped to `[LOGIT_EPS, 1 - LOGIT_EPS]`.
    pub fn logit(&mut self, a: Var) -> Var {
        self.map(a, Op::Logit(a), |x| {
            let x = x.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
            (x / (1.0 - x)).ln()
        })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "column slice out of range");
        let mut out = Mat::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(idx.len(), av.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    pub fn sparse(&mut self, a: Var, map: Arc<SparseRows>) -> Var {
        let out = map.apply(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::Sparse(a, map), ng)
    }

    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, geom.in_h * geom.in_w, "im2col input size mismatch");
        assert_eq!(av.cols, geom.channels, "im2col channel mismatch");
        let (oh, ow, k, c) = (geom.out_h(), geom.out_w(), geom.kernel, geom.channels);
        let mut out = Mat::zeros(oh * ow, k * k * c);
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = out.row_mut(oy * ow + ox);
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some(src) = geom.source(oy, ox, ky, kx) {
                            let dst = (ky * k + kx) * c;
                            orow[dst..dst + c].copy_from_slice(&av.data[src * c..(src + 1) * c]);
                        }
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Im2Col(a, geom), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(1, av.cols);
        for r in 0..av.rows {
            for (o, x) in out.data.iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let n = av.rows.max(1) as f64;
        for o in out.data.iter_mut() {
            *o /= n;
        }
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Mat::scalar(s), Op::SumAll(a), ng)
    }

    /// Weighted sum of selected entries: `sum w * a[r, c]`.
    pub fn pick(&mut self, a: Var, entries: Arc<Vec<(usize, usize, f64)>>) -> Var {
        let av = self.value(a);
        let s = entries.iter().map(|&(r, c, w)| w * av.at(r, c)).sum();
        let ng = self.ng(a);
        self.push(Mat::scalar(s), Op::Pick(a, entries), ng)
    }

    /// Squared euclidean distances between rows of `a` (`n x d`) and the
    /// constant rows of `points` (`m x d`), giving `n x m`.
    pub fn sq_dist(&mut self, a: Var, points: Arc<Mat>) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols, points.cols, "sq_dist dimension mismatch");
        let mut out = Mat::zeros(av.rows, points.rows);
        for i in 0..av.rows {
            let ar = av.row(i);
            for j in 0..points.rows {
                let d: f64 = ar.iter().zip(points.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                out.set(i, j, d);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SqDist(a, points), ng)
    }

    /// Grouped multi-head scaled dot-product attention. Output row `g` is the
    /// attention of `q[groups[g].query]` over `k/v[groups[g].keys]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: Arc<Vec<AttnGroup>>, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let c = qv.cols;
        assert!(heads > 0 && c % heads == 0, "channels must divide into heads");
        assert_eq!(kv.cols, c);
        assert_eq!(vv.cols, c);
        assert_eq!(kv.rows, vv.rows);
        let d = c / heads;
        let inv = 1.0 / (d as f64).sqrt();
        let total: usize = groups.iter().map(|g| g.keys.len()).sum::<usize>() * heads;
        let mut weights = Vec::with_capacity(total);
        let mut out = Mat::zeros(groups.len(), c);
        let mut buf = Vec::new();
        for (gi, g) in groups.iter().enumerate() {
            let qrow = qv.row(g.query);
            for h in 0..heads {
                let qs = &qrow[h * d..(h + 1) * d];
                buf.clear();
                for &kr in &g.keys {
                    let ks = &kv.row(kr)[h * d..(h + 1) * d];
                    buf.push(qs.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * inv);
                }
                softmax_in_place(&mut buf);
                let orow = &mut out.row_mut(gi)[h * d..(h + 1) * d];
                for (&w, &vr) in buf.iter().zip(&g.keys) {
                    for (o, x) in orow.iter_mut().zip(&vv.row(vr)[h * d..(h + 1) * d]) {
                        *o += w * x;
                    }
                }
                weights.extend_from_slice(&buf);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, groups, heads, weights }, ng)
    }

    /// Attention weights recorded by an [`Graph::attention`] node, laid out
    /// group-major, then head, then key.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &dyn Fn(&mut Mat)| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let shape = self.nodes[v.0].value.shape();
            let slot = grads[v.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
            f(slot);
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, &|ga| matmul_bt_acc(g, val(*b), ga));
                acc(*b, &|gb| matmul_at_acc(val(*a), g, gb));
            }
            Op::MatMulBt(a, b) => {
                acc(*a, &|ga| matmul_acc(g, val(*b), ga));
                acc(*b, &|gb| matmul_at_acc(g, val(*a), gb));
            }
            Op::Add(a, b) => {
                acc(*a, &|ga| ga.add_assign(g));
                acc(*b, &|gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|ga| ga.add_assign(g));
                acc(*b, &|gb| {
                    for (d, x) in gb.data.iter_mut().zip(&g.data) {
                        *d -= x;
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &|ga| ga.add_assign(g));
                acc(*b, &|gb| {
                    for r in 0..g.rows {
                        for (d, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &|ga| {
                    for ((d, x), o) in ga.data.iter_mut().zip(&g.data).zip(&val(*b).data) {
                        *d += x * o;
                    }
                });
                acc(*b, &|gb| {
                    for ((d, x), o) in gb.data.iter_mut().zip(&g.data).zip(&val(*a).data) {
                        *d += x * o;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &|ga| {
                for (d, x) in ga.data.iter_mut().zip(&g.data) {
                    *d += s * x;
                }
            }),
            Op::Sigmoid(a) => acc(*a, &|ga| {
                for ((d, x), s) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                    *d += x * s * (1.0 - s);
                }
            }),
            Op::Tanh(a) => acc(*a, &|ga| {
                for ((d, x), t) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                    *d += x * (1.0 - t * t);
                }
            }),
            Op::Relu(a) => acc(*a, &|ga| {
                for ((d, x), inp) in ga.data.iter_mut().zip(&g.data).zip(&val(*a).data) {
                    if *inp > 0.0 {
                        *d += x;
                    }
                }
            }),
            Op::Exp(a) => acc(*a, &|ga| {
                for ((d, x), e) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                    *d += x * e;
                }
            }),
            Op::Abs(a) => acc(*a, &|ga| {
                for ((d, x), inp) in ga.data.iter_mut().zip(&g.data).zip(&val(*a).data) {
                    *d += x * inp.signum() * f64::from(*inp != 0.0);
                }
            }),
            Op::Softplus(a) => acc(*a, &|ga| {
                for ((d, x), inp) in ga.data.iter_mut().zip(&g.data).zip(&val(*a).data) {
                    *d += x * sigmoid(*inp);
                }
            }),
            Op::Logit(a) => acc(*a, &|ga| {
                for ((d, x), inp) in ga.data.iter_mut().zip(&g.data).zip(&val(*a).data) {
                    if *inp > LOGIT_EPS && *inp < 1.0 - LOGIT_EPS {
                        *d += x / (inp * (1.0 - inp));
                    }
                }
            }),
            Op::SoftmaxRows(a) => acc(*a, &|ga| {
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, p), q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d += p * (q - dot);
                    }
                }
            }),
            Op::LogSoftmaxRows(a) => acc(*a, &|ga| {
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gs: f64 = gr.iter().sum();
                    for ((d, ly), q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d += q - ly.exp() * gs;
                    }
                }
            }),
            Op::SliceCols(a, start) => acc(*a, &|ga| {
                for r in 0..g.rows {
                    for (d, x) in ga.row_mut(r)[*start..*start + g.cols].iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
            }),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols;
                    acc(*p, &|gp| {
                        for r in 0..g.rows {
                            for (d, x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *d += x;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).data.len();
                    acc(*p, &|gp| {
                        for (d, x) in gp.data.iter_mut().zip(&g.data[off..off + n]) {
                            *d += x;
                        }
                    });
                    off += n;
                }
            }
            Op::GatherRows(a, idx) => acc(*a, &|ga| {
                for (r, &i) in idx.iter().enumerate() {
                    for (d, x) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
            }),
            Op::Sparse(a, map) => acc(*a, &|ga| map.apply_transpose_acc(g, ga)),
            Op::Im2Col(a, geom) => acc(*a, &|ga| {
                let (oh, ow, k, c) = (geom.out_h(), geom.out_w(), geom.kernel, geom.channels);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let grow = g.row(oy * ow + ox);
                        for ky in 0..k {
                            for kx in 0..k {
                                if let Some(src) = geom.source(oy, ox, ky, kx) {
                                    let s = (ky * k + kx) * c;
                                    for (d, x) in ga.data[src * c..(src + 1) * c].iter_mut().zip(&grow[s..s + c]) {
                                        *d += x;
                                    }
                                }
                            }
                        }
                    }
                }
            }),
            Op::MeanRows(a) => acc(*a, &|ga| {
                let n = ga.rows.max(1) as f64;
                for r in 0..ga.rows {
                    for (d, x) in ga.row_mut(r).iter_mut().zip(&g.data) {
                        *d += x / n;
                    }
                }
            }),
            Op::SumAll(a) => acc(*a, &|ga| {
                for d in ga.data.iter_mut() {
                    *d += g.data[0];
                }
            }),
            Op::Pick(a, entries) => acc(*a, &|ga| {
                let cols = ga.cols;
                for &(r, c, w) in entries.iter() {
                    ga.data[r * cols + c] += w * g.data[0];
                }
            }),
            Op::SqDist(a, pts) => acc(*a, &|ga| {
                let av = val(*a);
                for i in 0..av.rows {
                    for j in 0..pts.rows {
                        let gij = g.at(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..av.cols {
                            ga.data[i * av.cols + c] += 2.0 * gij * (av.at(i, c) - pts.at(j, c));
                        }
                    }
                }
            }),
            Op::Attention { q, k, v, groups, heads, weights } => {
                self.attention_backward(g, *q, *k, *v, groups, *heads, weights, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Mat,
        q: Var,
        k: Var,
        v: Var,
        groups: &[AttnGroup],
        heads: usize,
        weights: &[f64],
        grads: &mut [Option<Mat>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let c = qv.cols;
        let d = c / heads;
        let inv = 1.0 / (d as f64).sqrt();
        let mut gq = Mat::zeros(qv.rows, c);
        let mut gk = Mat::zeros(kv.rows, c);
        let mut gv = Mat::zeros(vv.rows, c);
        let mut off = 0;
        let mut dlogit = Vec::new();
        for (gi, grp) in groups.iter().enumerate() {
            let grow = g.row(gi);
            for h in 0..heads {
                let n = grp.keys.len();
                let w = &weights[off..off + n];
                off += n;
                let go = &grow[h * d..(h + 1) * d];
                dlogit.clear();
                for (&a, &vr) in w.iter().zip(&grp.keys) {
                    let vs = &vv.row(vr)[h * d..(h + 1) * d];
                    dlogit.push(go.iter().zip(vs).map(|(x, y)| x * y).sum::<f64>());
                    for (dv, x) in gv.row_mut(vr)[h * d..(h + 1) * d].iter_mut().zip(go) {
                        *dv += a * x;
                    }
                }
                let mean: f64 = w.iter().zip(&dlogit).map(|(a, x)| a * x).sum();
                let qs = &qv.row(grp.query)[h * d..(h + 1) * d];
                for ((&a, da), &kr) in w.iter().zip(dlogit.iter_mut()).zip(&grp.keys) {
                    *da = a * (*da - mean) * inv;
                    let ks = &kv.row(kr)[h * d..(h + 1) * d];
                    for (dq, x) in gq.row_mut(grp.query)[h * d..(h + 1) * d].iter_mut().zip(ks) {
                        *dq += *da * x;
                    }
                    for (dk, x) in gk.row_mut(kr)[h * d..(h + 1) * d].iter_mut().zip(qs) {
                        *dk += *da * x;
                    }
                }
            }
        }
        for (var, m) in [(q, gq), (k, gk), (v, gv)] {
            if !self.nodes[var.0].needs_grad {
                continue;
            }
            match &mut grads[var.0] {
                Some(slot) => slot.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        }
    }
}

const LOGIT_EPS: f64 = 1e-6;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
