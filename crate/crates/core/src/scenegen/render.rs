use serde::{Deserialize, Serialize};

use super::{object, EntityKind, SceneRecord};

/// `S×S×3` channels-last image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.size + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

const AGENT_BODY: [f64; 3] = [0.9, 0.9, 0.9];
const AGENT_TICK: [f64; 3] = [0.1, 0.1, 0.8];

fn object_color(class: usize) -> [f64; 3] {
    match class {
        object::BALL => [1.0, 0.2, 0.2],
        object::CUP => [0.2, 0.4, 1.0],
        object::BIKE => [0.2, 0.8, 0.2],
        object::CHAIR => [0.9, 0.9, 0.2],
        object::BOX => [0.7, 0.4, 0.1],
        _ => [0.3, 0.9, 0.9],
    }
}

/// Rasterizes a record. A pixel is painted when its center falls inside a
/// shape; objects are drawn first and agents on top.
pub fn render(record: &SceneRecord, size: usize) -> Raster {
    let mut data = vec![0.0; size * size * 3];
    let s = size as f64;
    let mut paint = |x: usize, y: usize, c: [f64; 3]| {
        let i = (y * size + x) * 3;
        data[i..i + 3].copy_from_slice(&c);
    };
    // Pixel index range whose centers may lie in [lo, hi].
    let span = |lo: f64, hi: f64| {
        let a = ((lo * s - 0.5).ceil().max(0.0)) as usize;
        let b = ((hi * s - 0.5).floor().min(s - 1.0)).max(-1.0);
        if b < 0.0 {
            (1, 0)
        } else {
            (a, b as usize)
        }
    };

    let order = record
        .entities
        .iter()
        .filter(|e| e.kind == EntityKind::Object)
        .chain(record.entities.iter().filter(|e| e.kind == EntityKind::Agent));
    for e in order {
        let b = e.bbox();
        let (x0, x1) = span(b.x1, b.x2);
        let (y0, y1) = span(b.y1, b.y2);
        let (cx, cy) = (e.center.x, e.center.y);
        let (rx, ry) = (e.size[0] / 2.0, e.size[1] / 2.0);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let (u, v) = ((px as f64 + 0.5) / s, (py as f64 + 0.5) / s);
                let (dx, dy) = (u - cx, v - cy);
                let in_ellipse = (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0;
                match e.kind {
                    EntityKind::Agent => {
                        if !in_ellipse {
                            continue;
                        }
                        // Tick: pixels within half a pixel of the heading ray.
                        let (hx, hy) = (e.orientation.cos(), e.orientation.sin());
                        let along = dx * hx + dy * hy;
                        let across = (dx * hy - dy * hx).abs();
                        let tick = along >= 0.0 && across <= 0.6 / s;
                        paint(px, py, if tick { AGENT_TICK } else { AGENT_BODY });
                    }
                    EntityKind::Object => {
                        if e.class_id != object::BALL || in_ellipse {
                            paint(px, py, object_color(e.class_id));
                        }
                    }
                }
            }
        }
    }
    Raster { size, data }
}
