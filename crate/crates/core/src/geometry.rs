//! Relative-coordinate bounding boxes.
//!
//! Boxes are stored as center/size fractions of the image width and height,
//! the same convention used by YOLO-style label files. Corner conventions only
//! appear at ingestion and rendering boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used by every geometric invariant check.
pub const GEOMETRY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Checked constructor; rejects degenerate and out-of-range boxes.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        match b.problems().into_iter().next() {
            None => Ok(b),
            Some(p) => Err(Error::InvalidBox(p)),
        }
    }

    /// Builds a box from pixel corners `(x0, y0, x1, y1)` of a `width` x `height` image.
    pub fn from_pixel_corners(x0: f64, y0: f64, x1: f64, y1: f64, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidBox("image has zero extent".into()));
        }
        let (w, h) = (f64::from(width), f64::from(height));
        let x0 = x0.clamp(0.0, w);
        let x1 = x1.clamp(0.0, w);
        let y0 = y0.clamp(0.0, h);
        let y1 = y1.clamp(0.0, h);
        BBox::new((x0 + x1) / (2.0 * w), (y0 + y1) / (2.0 * h), (x1 - x0) / w, (y1 - y0) / h)
    }

    /// Corner form `(x0, y0, x1, y1)` in relative coordinates.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    /// Every violated invariant, as human-readable strings. Empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let t = GEOMETRY_TOLERANCE;
        if ![self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) {
            out.push(format!("non-finite coordinate in {self:?}"));
            return out;
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            out.push(format!("degenerate size w={} h={}", self.w, self.h));
        }
        if self.w > 1.0 + t || self.h > 1.0 + t {
            out.push(format!("size exceeds the image w={} h={}", self.w, self.h));
        }
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            out.push(format!("center out of range cx={} cy={}", self.cx, self.cy));
        }
        let (x0, y0, x1, y1) = self.corners();
        if x0 < -t || y0 < -t || x1 > 1.0 + t || y1 > 1.0 + t {
            out.push(format!("box leaves the unit square ({x0}, {y0}, {x1}, {y1})"));
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.problems().is_empty()
    }

    /// Box of the transposed image: the axes swap in relative space.
    pub fn transpose(&self) -> BBox {
        BBox { cx: self.cy, cy: self.cx, w: self.h, h: self.w }
    }

    /// Fraction of the image covered by the box.
    pub fn relative_area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        // capped at the narrower side so identical boxes overlap exactly
        let iw = (ax1.min(bx1) - ax0.max(bx0)).clamp(0.0, self.w.min(other.w));
        let ih = (ay1.min(by1) - ay0.max(by0)).clamp(0.0, self.h.min(other.h));
        iw * ih
    }
}

pub fn transpose_bbox(b: &BBox) -> BBox {
    b.transpose()
}

pub fn bbox_relative_area(b: &BBox) -> f64 {
    b.relative_area()
}
