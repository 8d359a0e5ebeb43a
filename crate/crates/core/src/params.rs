//! Named parameter storage shared by the model, the optimizers and checkpoints.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Grads, Graph, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Mat,
    /// Frozen parameters are bound as constants and never updated.
    pub frozen: bool,
}

/// Ordered collection of named parameters. Names are dotted paths whose first
/// segment is the parameter group (`radar.embed`, `encoder.0.tsa.wq`, ...).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Values are rounded to `f32` so checkpoints that
    /// store 32-bit floats reproduce them exactly.
    pub fn add(&mut self, name: impl Into<String>, mut value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        quantize(&mut value);
        self.names.push(name);
        self.params.push(Param { value, frozen: false });
        ParamId(self.params.len() - 1)
    }

    pub fn add_normal<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let m = if std == 0.0 {
            Mat::zeros(rows, cols)
        } else {
            let normal = Normal::new(0.0, std).expect("valid std");
            Mat::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
        };
        self.add(name, m)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    /// Replaces a parameter value (rounded to `f32`).
    pub fn set(&mut self, id: ParamId, mut value: Mat) {
        assert_eq!(value.shape(), self.params[id.0].value.shape(), "parameter shape change");
        quantize(&mut value);
        self.params[id.0].value = value;
    }

    /// Raw access that skips the `f32` rounding of [`ParamStore::set`]; meant
    /// for finite-difference probes that need sub-`f32` perturbations.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    /// Group name of a parameter: the first dotted segment of its name.
    pub fn group(&self, id: ParamId) -> &str {
        self.names[id.0].split('.').next().unwrap_or("")
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for id in self.ids() {
            let g = self.group(id);
            if !out.iter().any(|x| x == g) {
                out.push(g.to_string());
            }
        }
        out
    }

    /// `(name, rows, cols)` for every parameter, in registration order.
    pub fn census(&self) -> Vec<(String, usize, usize)> {
        self.iter().map(|(n, p)| (n.to_string(), p.value.rows, p.value.cols)).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Gradients for every bound, trainable parameter (zeros where the loss
    /// does not depend on the parameter).
    pub fn collect_grads(&self, graph: &Graph, grads: &Grads) -> Vec<Option<Mat>> {
        let mut out = vec![None; self.params.len()];
        for (id, var) in graph.param_vars() {
            if self.params[id.0].frozen {
                continue;
            }
            let p = &self.params[id.0].value;
            out[id.0] = Some(grads.get(var).cloned().unwrap_or_else(|| Mat::zeros(p.rows, p.cols)));
        }
        out
    }
}

pub fn quantize(m: &mut Mat) {
    for v in m.data.iter_mut() {
        *v = *v as f32 as f64;
    }
}
