//! Axis-aligned part boxes in normalized object coordinates.
//!
//! Coordinates follow the corner convention `(x_min, y_min, x_max, y_max)`
//! with x pointing right and y pointing down. A normalized object lives in
//! `[-1, 1] x [-1, 1]`.

use serde::{Deserialize, Serialize};

/// Smallest extent a box may have along either axis.
pub const MIN_BOX_SIZE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)` on a canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub const fn zero() -> Self {
        BBox::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Turns raw decoder coordinates into a usable box: corners are sorted,
    /// clipped to the unit square and widened to [`MIN_BOX_SIZE`].
    pub fn from_decoded(raw: [f64; 4]) -> Self {
        let (x0, x1) = (raw[0].min(raw[2]), raw[0].max(raw[2]));
        let (y0, y1) = (raw[1].min(raw[3]), raw[1].max(raw[3]));
        let clip = |v: f64| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
        let mut b = BBox::new(clip(x0), clip(y0), clip(x1), clip(y1));
        b.enforce_min_size();
        b
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Strictly positive extent on both axes.
    pub fn is_proper(&self) -> bool {
        self.is_finite() && self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Closed intersection test after growing both boxes by `eps` on every side.
    pub fn touches(&self, other: &BBox, eps: f64) -> bool {
        self.x_min - eps <= other.x_max + eps
            && other.x_min - eps <= self.x_max + eps
            && self.y_min - eps <= other.y_max + eps
            && other.y_min - eps <= self.y_max + eps
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x_min.min(other.x_min),
            self.y_min.min(other.y_min),
            self.x_max.max(other.x_max),
            self.y_max.max(other.y_max),
        )
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    /// Scales width and height about the box center.
    pub fn scaled_about_center(&self, sx: f64, sy: f64) -> BBox {
        let (cx, cy) = self.center();
        let (hw, hh) = (0.5 * self.width() * sx, 0.5 * self.height() * sy);
        BBox::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }

    /// Scales all coordinates about the origin.
    pub fn scaled_about_origin(&self, sx: f64, sy: f64) -> BBox {
        BBox::new(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)
    }

    /// Horizontal mirror about `x = 0`.
    pub fn mirrored(&self) -> BBox {
        BBox::new(-self.x_max, self.y_min, -self.x_min, self.y_max)
    }

    /// Widens the box to [`MIN_BOX_SIZE`] per axis, keeping it inside the
    /// unit square. Returns whether anything changed.
    pub fn enforce_min_size(&mut self) -> bool {
        let mut changed = false;
        if self.width() < MIN_BOX_SIZE {
            let (lo, hi) = widen(self.x_min, self.x_max);
            self.x_min = lo;
            self.x_max = hi;
            changed = true;
        }
        if self.height() < MIN_BOX_SIZE {
            let (lo, hi) = widen(self.y_min, self.y_max);
            self.y_min = lo;
            self.y_max = hi;
            changed = true;
        }
        changed
    }

    /// Pixel footprint of the box on a `width x height` canvas covering the
    /// unit square. `None` when the footprint is empty.
    pub fn pixel_rect(&self, width: usize, height: usize) -> Option<PixelRect> {
        if !self.is_finite() {
            return None;
        }
        let to_px = |v: f64, n: usize| (v + 1.0) * 0.5 * n as f64;
        let lo = |v: f64, n: usize| (to_px(v, n).floor().max(0.0) as usize).min(n);
        let hi = |v: f64, n: usize| (to_px(v, n).ceil().max(0.0) as usize).min(n);
        let rect = PixelRect {
            x0: lo(self.x_min, width),
            y0: lo(self.y_min, height),
            x1: hi(self.x_max, width),
            y1: hi(self.y_max, height),
        };
        (rect.x1 > rect.x0 && rect.y1 > rect.y0).then_some(rect)
    }
}

fn widen(lo: f64, hi: f64) -> (f64, f64) {
    let c = 0.5 * (lo + hi);
    let c = c.clamp(-1.0 + 0.5 * MIN_BOX_SIZE, 1.0 - 0.5 * MIN_BOX_SIZE);
    (c - 0.5 * MIN_BOX_SIZE, c + 0.5 * MIN_BOX_SIZE)
}
