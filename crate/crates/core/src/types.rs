//! Object boxes, classes and labelled detections shared across the pipeline.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Vehicle,
    Motorcycle,
    Pedestrian,
    Barrier,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [Self::Vehicle, Self::Motorcycle, Self::Pedestrian, Self::Barrier];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Vehicle => "vehicle",
            Self::Motorcycle => "motorcycle",
            Self::Pedestrian => "pedestrian",
            Self::Barrier => "barrier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Moving,
    Stopped,
}

impl Attribute {
    /// Speed above which an object counts as moving (m/s).
    pub const MOVING_SPEED: f64 = 0.5;

    pub fn from_velocity(v: [f64; 2]) -> Self {
        if v[0].hypot(v[1]) > Self::MOVING_SPEED {
            Self::Moving
        } else {
            Self::Stopped
        }
    }
}

/// Oriented 3-D box in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// Length (along heading), width, height.
    pub size: [f64; 3],
    /// Heading in `(-pi, pi]`.
    pub yaw: f64,
    pub velocity: [f64; 2],
}

impl Box3D {
    pub fn is_valid(&self) -> bool {
        self.size.iter().all(|s| *s > 0.0 && s.is_finite())
            && self.center.iter().chain(&self.velocity).all(|v| v.is_finite())
            && self.yaw.is_finite()
    }

    /// Ground-footprint corners, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, b)| {
            [self.center[0] + c * a - s * b, self.center[1] + s * a + c * b]
        })
    }

    /// All eight corners.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let fp = self.footprint();
        let z0 = self.center[2] - self.size[2] / 2.0;
        let z1 = self.center[2] + self.size[2] / 2.0;
        let mut out = [[0.0; 3]; 8];
        for (k, p) in fp.iter().enumerate() {
            out[k] = [p[0], p[1], z0];
            out[k + 4] = [p[0], p[1], z1];
        }
        out
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut w = a.rem_euclid(tau);
    if w > std::f64::consts::PI {
        w -= tau;
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(flatten)]
    pub bbox: Box3D,
    pub class: ObjectClass,
    pub attribute: Attribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: Box3D,
    pub class: ObjectClass,
    pub confidence: f64,
    pub attribute: Attribute,
    /// Softmax over the object classes followed by no-object.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<f64>,
}
