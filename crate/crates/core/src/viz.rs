//! Top-down plot of one frame: ground truth, predictions and radar returns.

use crate::geometry::{BevGridSpec, SensorRig};
use crate::synth::{CameraImage, FrameRecord};
use crate::types::{Box3D, Detection};

pub const PIXELS_PER_METER: f64 = 10.0;
/// Predictions below this confidence are not drawn.
pub const MIN_CONFIDENCE: f64 = 0.3;

const WHITE: [u8; 3] = [255, 255, 255];
const GRID: [u8; 3] = [225, 225, 225];
const EGO: [u8; 3] = [0, 0, 0];
const RADAR: [u8; 3] = [120, 120, 120];
const TRUTH: [u8; 3] = [0, 150, 60];
const PRED: [u8; 3] = [220, 30, 30];

struct Canvas {
    img: CameraImage,
    half_x: f64,
    half_y: f64,
}

impl Canvas {
    fn new(grid: &BevGridSpec) -> Self {
        let (half_x, half_y) = (grid.half_extent_x(), grid.half_extent_y());
        let w = (2.0 * half_y * PIXELS_PER_METER).round() as usize;
        let h = (2.0 * half_x * PIXELS_PER_METER).round() as usize;
        Self { img: CameraImage::filled(w, h, WHITE), half_x, half_y }
    }

    /// Ego x points up the image, ego y points left.
    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        ((self.half_y - y) * PIXELS_PER_METER, (self.half_x - x) * PIXELS_PER_METER)
    }

    fn put(&mut self, u: i64, v: i64, c: [u8; 3]) {
        if u >= 0 && v >= 0 && (u as usize) < self.img.width && (v as usize) < self.img.height {
            let k = (v as usize * self.img.width + u as usize) * 3;
            self.img.data[k..k + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: [u8; 3]) {
        let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let (u, v) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            self.put(u.round() as i64, v.round() as i64, c);
        }
    }

    fn dot(&mut self, p: (f64, f64), r: i64, c: [u8; 3]) {
        let (u, v) = (p.0.round() as i64, p.1.round() as i64);
        for du in -r..=r {
            for dv in -r..=r {
                self.put(u + du, v + dv, c);
            }
        }
    }

    fn footprint(&mut self, b: &Box3D, c: [u8; 3]) {
        let fp = b.footprint();
        for k in 0..4 {
            let (p, q) = (fp[k], fp[(k + 1) % 4]);
            self.line(self.to_px(p[0], p[1]), self.to_px(q[0], q[1]), c);
        }
        // heading tick from center to the front edge
        let front = [(fp[0][0] + fp[3][0]) / 2.0, (fp[0][1] + fp[3][1]) / 2.0];
        self.line(self.to_px(b.center[0], b.center[1]), self.to_px(front[0], front[1]), c);
    }
}

/// Renders ground truth (green), confident predictions (red) and radar
/// returns (gray) over the BEV grid extent.
pub fn render_bev(frame: &FrameRecord, detections: &[Detection], rig: &SensorRig, grid: &BevGridSpec) -> CameraImage {
    let mut cv = Canvas::new(grid);
    for i in 0..=grid.x {
        let x = -cv.half_x + i as f64 * grid.cell_size;
        if i % 4 == 0 {
            cv.line(cv.to_px(x, -cv.half_y), cv.to_px(x, cv.half_y), GRID);
        }
    }
    for j in 0..=grid.y {
        let y = -cv.half_y + j as f64 * grid.cell_size;
        if j % 4 == 0 {
            cv.line(cv.to_px(-cv.half_x, y), cv.to_px(cv.half_x, y), GRID);
        }
    }
    if let Ok(points) = frame.radar.to_ego(rig) {
        for p in points {
            cv.dot(cv.to_px(p.x, p.y), 1, RADAR);
        }
    }
    for a in &frame.annotations {
        cv.footprint(&a.bbox, TRUTH);
    }
    for d in detections.iter().filter(|d| d.confidence >= MIN_CONFIDENCE) {
        cv.footprint(&d.bbox, PRED);
    }
    cv.dot(cv.to_px(0.0, 0.0), 3, EGO);
    cv.img
}
