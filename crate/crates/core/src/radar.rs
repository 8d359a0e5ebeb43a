//! Radar backbone: multi-radar points are moved into the ego frame, counted
//! per BEV cell, and each count is embedded through a capacity-limited
//! look-up table and a sigmoid/tanh gated unit.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{bev_cell_of, BevGridSpec, SensorRig};
use crate::params::{ParamId, ParamStore};

/// Attribute count per point: position (3), radial velocity, cross-section.
pub const RADAR_POINT_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    /// Sensor frame, meters.
    pub position: [f64; 3],
    pub radial_velocity: f64,
    pub cross_section: f64,
}

impl RadarPoint {
    pub fn attributes(&self) -> [f64; RADAR_POINT_DIM] {
        let p = self.position;
        [p[0], p[1], p[2], self.radial_velocity, self.cross_section]
    }
}

/// Radar returns of one timestep, indexed by sensor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloudSet {
    pub sensors: Vec<Vec<RadarPoint>>,
}

impl PointCloudSet {
    pub fn empty(n_sensors: usize) -> Self {
        Self { sensors: vec![Vec::new(); n_sensors] }
    }

    pub fn num_points(&self) -> usize {
        self.sensors.iter().map(Vec::len).sum()
    }

    /// Ego-frame positions of every point, sensor by sensor.
    pub fn to_ego(&self, rig: &SensorRig) -> Result<Vec<Vector3<f64>>> {
        let mut out = Vec::with_capacity(self.num_points());
        for (s, pts) in self.sensors.iter().enumerate() {
            if pts.is_empty() {
                continue;
            }
            let pose = rig
                .radar_poses
                .get(s)
                .ok_or_else(|| Error::Config(format!("no pose for radar sensor {s}")))?;
            out.extend(pts.iter().map(|p| pose.apply(&Vector3::from(p.position))));
        }
        Ok(out)
    }
}

/// Per-cell radar point counts, row-major over `(i, j)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyGrid {
    pub x: usize,
    pub y: usize,
    pub counts: Vec<u32>,
}

impl SaliencyGrid {
    pub fn zeros(grid: &BevGridSpec) -> Self {
        Self { x: grid.x, y: grid.y, counts: vec![0; grid.cells()] }
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.counts[i * self.y + j]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Counts clamped to the table capacity, as row indices into the table.
    pub fn tokens(&self, capacity: usize) -> Vec<usize> {
        self.counts.iter().map(|&c| (c as usize).min(capacity)).collect()
    }
}

pub fn build_saliency(clouds: &PointCloudSet, rig: &SensorRig, grid: &BevGridSpec) -> Result<SaliencyGrid> {
    let mut sal = SaliencyGrid::zeros(grid);
    for p in clouds.to_ego(rig)? {
        if let Some((i, j)) = bev_cell_of(&p, grid) {
            sal.counts[grid.flat(i, j)] += 1;
        }
    }
    Ok(sal)
}

/// Looks up one table row per cell; `table` is `(K+1) x C`.
pub fn embed_saliency(g: &mut Graph, sal: &SaliencyGrid, table: Var) -> Var {
    let capacity = g.value(table).rows - 1;
    g.gather_rows(table, Arc::new(sal.tokens(capacity)))
}

/// `sigmoid(E W1 + b1) * tanh(E W2 + b2)` per cell (row-vector convention).
pub fn gated_unit(g: &mut Graph, embedded: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let gate = g.linear(embedded, w1, b1);
    let gate = g.sigmoid(gate);
    let signal = g.linear(embedded, w2, b2);
    let signal = g.tanh(signal);
    g.mul(gate, signal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RadarBackbone {
    pub capacity: usize,
    pub channels: usize,
    pub table: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl RadarBackbone {
    pub fn new<R: Rng>(store: &mut ParamStore, capacity: usize, channels: usize, rng: &mut R) -> Self {
        let wstd = 1.0 / (channels as f64).sqrt();
        Self {
            capacity,
            channels,
            table: store.add_normal("radar.embed", capacity + 1, channels, 1.0, rng),
            w1: store.add_normal("radar.gate.w1", channels, channels, wstd, rng),
            b1: store.add_zeros("radar.gate.b1", 1, channels),
            w2: store.add_normal("radar.gate.w2", channels, channels, wstd, rng),
            b2: store.add_zeros("radar.gate.b2", 1, channels),
        }
    }

    /// Radar BEV, `(X*Y) x C`, every entry in `(-1, 1)`.
    pub fn forward(&self, g: &mut Graph, sal: &SaliencyGrid) -> Var {
        let table = g.p(self.table);
        let e = embed_saliency(g, sal, table);
        let (w1, b1, w2, b2) = (g.p(self.w1), g.p(self.b1), g.p(self.w2), g.p(self.b2));
        gated_unit(g, e, w1, b1, w2, b2)
    }
}
