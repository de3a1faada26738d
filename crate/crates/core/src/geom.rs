//! Axis-aligned boxes and binary masks shared across modules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box as `(x_min, y_min, width, height)` in pixels.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = self.right().clamp(0.0, width);
        let y1 = self.bottom().clamp(0.0, height);
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height && self.w >= 0.0 && self.h >= 0.0
    }
}

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::config(format!("mask {width}x{height} needs {} values", width * height)));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Tight integer bounding box of the set pixels, if any.
    pub fn bounding_box(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64))
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    /// Binary IoU; two empty masks count as identical (1.0).
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Nearest-neighbor resample, sampling at pixel centers.
    pub fn resize_nearest(&self, width: usize, height: usize) -> BinaryMask {
        let mut out = BinaryMask::new(width, height);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                out.data[y * width + x] = self.data[sy * self.width + sx];
            }
        }
        out
    }
}
