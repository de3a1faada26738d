//! Anchor generation, box decoding, non-maximum suppression and mask
//! rendering into image space.
//!
//! Box parameterization, for grid cell `(i, j)` at stride `s` and anchor
//! `(aw, ah)`:
//!
//! ```text
//! cx = (j + σ(tx))·s    cy = (i + σ(ty))·s    w = aw·exp(tw)    h = ah·exp(th)
//! ```

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::sigmoid;
use crate::error::{Error, Result};
use crate::fpn::{LEVELS, LEVEL_STRIDES};
use crate::geom::{BBox, BinaryMask};
use crate::heads::{box_channel, cls_channel, ANCHORS_PER_LEVEL, MASK_SIZE};
use crate::tensor::{Float, Tensor};

/// Center offsets are clamped to `[CENTER_EPS, 1 − CENTER_EPS]` before the
/// inverse sigmoid when encoding.
pub const CENTER_EPS: f64 = 0.01;
pub const MASK_THRESHOLD: f32 = 0.5;

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Anchor {
    pub level: usize,
    /// Slot within the level, `0..ANCHORS_PER_LEVEL`.
    pub slot: usize,
    pub width: f64,
    pub height: f64,
}

impl Anchor {
    /// IoU of two boxes sharing a center.
    pub fn shape_iou(&self, w: f64, h: f64) -> f64 {
        let inter = self.width.min(w) * self.height.min(h);
        inter / (self.width * self.height + w * h - inter)
    }

    pub fn global_index(&self) -> usize {
        self.level * ANCHORS_PER_LEVEL + self.slot
    }
}

/// Bind six `(width, height)` priors to levels in ascending area order:
/// the two smallest go to P3, the two largest to P5.
pub fn generate_anchors(pairs: &[[f32; 2]]) -> Result<Vec<Anchor>> {
    if pairs.len() != LEVELS * ANCHORS_PER_LEVEL {
        return Err(Error::config(format!(
            "{} anchors configured, expected {}",
            pairs.len(),
            LEVELS * ANCHORS_PER_LEVEL
        )));
    }
    if pairs
        .iter()
        .any(|p| !(p[0] > 0.0 && p[1] > 0.0 && p[0].is_finite() && p[1].is_finite()))
    {
        return Err(Error::config("anchor sizes must be positive"));
    }
    let mut sorted: Vec<[f32; 2]> = pairs.to_vec();
    sorted.sort_by(|a, b| (a[0] * a[1]).total_cmp(&(b[0] * b[1])));
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, p)| Anchor {
            level: i / ANCHORS_PER_LEVEL,
            slot: i % ANCHORS_PER_LEVEL,
            width: p[0] as f64,
            height: p[1] as f64,
        })
        .collect())
}

/// Position of a prediction on the grid.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRef {
    pub level: usize,
    pub batch: usize,
    pub row: usize,
    pub col: usize,
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
    /// Fruit probability on the 32×32 grid, row-major.
    pub mask32: Option<Vec<f32>>,
    pub rendered_mask: Option<BinaryMask>,
    pub cell: Option<CellRef>,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Self {
            bbox,
            score,
            class_id: 0,
            mask32: None,
            rendered_mask: None,
            cell: None,
        }
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn decode_box(t: [f64; 4], row: usize, col: usize, anchor: &Anchor, stride: usize) -> BBox {
    let s = stride as f64;
    let cx = (col as f64 + sigmoid(t[0])) * s;
    let cy = (row as f64 + sigmoid(t[1])) * s;
    BBox::from_center(cx, cy, anchor.width * t[2].exp(), anchor.height * t[3].exp())
}

/// Inverse of [`decode_box`] for the cell containing the box center.
pub fn encode_box(b: &BBox, row: usize, col: usize, anchor: &Anchor, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    let (cx, cy) = b.center();
    let fx = (cx / s - col as f64).clamp(CENTER_EPS, 1.0 - CENTER_EPS);
    let fy = (cy / s - row as f64).clamp(CENTER_EPS, 1.0 - CENTER_EPS);
    [logit(fx), logit(fy), (b.w / anchor.width).ln(), (b.h / anchor.height).ln()]
}

/// Decode every (cell, anchor) of one level for batch element `batch`,
/// keeping those with `σ(objectness)·σ(class) ≥ conf_threshold`. Boxes are
/// clipped to `image_size = (width, height)`. Masks are attached later,
/// once the surviving cells are known.
#[allow(clippy::too_many_arguments)]
pub fn decode_boxes<T: Float>(
    cls: &Tensor<T>,
    boxes: &Tensor<T>,
    batch: usize,
    level: usize,
    anchors: &[Anchor],
    conf_threshold: f64,
    image_size: (usize, usize),
) -> Vec<Detection> {
    let stride = LEVEL_STRIDES[level];
    let s = cls.shape();
    let level_anchors: Vec<&Anchor> = anchors.iter().filter(|a| a.level == level).collect();
    let mut out = Vec::new();
    for row in 0..s.h {
        for col in 0..s.w {
            for anchor in &level_anchors {
                let a = anchor.slot;
                let obj = sigmoid(cls.at(batch, cls_channel(a, 0), row, col).as_f64());
                let class = sigmoid(cls.at(batch, cls_channel(a, 1), row, col).as_f64());
                let score = obj * class;
                if score < conf_threshold {
                    continue;
                }
                let t = [0, 1, 2, 3].map(|k| boxes.at(batch, box_channel(a, k), row, col).as_f64());
                let bbox = decode_box(t, row, col, anchor, stride).clip(image_size.0 as f64, image_size.1 as f64);
                let mut det = Detection::new(bbox, score);
                det.cell = Some(CellRef {
                    level,
                    batch,
                    row,
                    col,
                    slot: a,
                });
                out.push(det);
            }
        }
    }
    out
}

fn nms_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
}

/// Greedy NMS: visit by descending score (ties by x_min, then y_min) and
/// keep a candidate iff its IoU with every kept box is below the threshold.
pub fn nms(mut candidates: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    candidates.sort_by(nms_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(candidates.len());
    for c in candidates {
        if kept.iter().all(|k| k.bbox.iou(&c.bbox) < iou_threshold) {
            kept.push(c);
        }
    }
    kept
}

/// Bilinear resize with half-pixel centers, clamped at the borders.
pub fn resize_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    let mut out = vec![0.0; dw * dh];
    let sample = |pos: f64, dst: usize, src_len: usize| {
        let p = ((pos + 0.5) * src_len as f64 / dst as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, p - lo as f64)
    };
    for y in 0..dh {
        let (y0, y1, fy) = sample(y as f64, dh, sh);
        for x in 0..dw {
            let (x0, x1, fx) = sample(x as f64, dw, sw);
            let top = src[y0 * sw + x0] as f64 * (1.0 - fx) + src[y0 * sw + x1] as f64 * fx;
            let bottom = src[y1 * sw + x0] as f64 * (1.0 - fx) + src[y1 * sw + x1] as f64 * fx;
            out[y * dw + x] = (top * (1.0 - fy) + bottom * fy) as f32;
        }
    }
    out
}

/// Pixel footprint `(x0, y0, width, height)` of a box, rounded to the
/// pixel grid and clipped to the image.
pub fn pixel_footprint(b: &BBox, image_size: (usize, usize)) -> (usize, usize, usize, usize) {
    let clip = |v: f64, max: usize| v.round().clamp(0.0, max as f64) as usize;
    let x0 = clip(b.x, image_size.0);
    let y0 = clip(b.y, image_size.1);
    let x1 = clip(b.right(), image_size.0);
    let y1 = clip(b.bottom(), image_size.1);
    (x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
}

/// Rendered mask, plus `false` when the box was degenerate (< 1 px).
pub fn render_instance_mask(det: &Detection, image_size: (usize, usize)) -> (BinaryMask, bool) {
    let mut mask = BinaryMask::new(image_size.0, image_size.1);
    let (x0, y0, bw, bh) = pixel_footprint(&det.bbox, image_size);
    let Some(mask32) = det.mask32.as_ref() else {
        return (mask, bw >= 1 && bh >= 1);
    };
    if bw < 1 || bh < 1 {
        return (mask, false);
    }
    let resized = resize_bilinear(mask32, MASK_SIZE, MASK_SIZE, bw, bh);
    for y in 0..bh {
        for x in 0..bw {
            if resized[y * bw + x] >= MASK_THRESHOLD {
                mask.set(x0 + x, y0 + y, true);
            }
        }
    }
    (mask, true)
}

/// Cluster `(width, height)` pairs into `k` anchor shapes with k-means
/// under the `1 − shape IoU` distance. Centers start at area quantiles, so
/// the result is deterministic; it is returned sorted by area.
pub fn kmeans_anchors(sizes: &[(f64, f64)], k: usize, iterations: usize) -> Result<Vec<[f32; 2]>> {
    if sizes.len() < k || k == 0 {
        return Err(Error::config(format!("need at least {k} boxes to fit {k} anchors")));
    }
    let mut sorted = sizes.to_vec();
    sorted.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    let mut centers: Vec<(f64, f64)> = (0..k).map(|i| sorted[(2 * i + 1) * sorted.len() / (2 * k)]).collect();
    let shape_iou = |a: (f64, f64), b: (f64, f64)| {
        let inter = a.0.min(b.0) * a.1.min(b.1);
        inter / (a.0 * a.1 + b.0 * b.1 - inter)
    };
    for _ in 0..iterations {
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for &s in &sorted {
            let best = (0..k)
                .max_by(|&i, &j| shape_iou(s, centers[i]).total_cmp(&shape_iou(s, centers[j])).then(j.cmp(&i)))
                .expect("k > 0");
            sums[best].0 += s.0;
            sums[best].1 += s.1;
            sums[best].2 += 1;
        }
        let next: Vec<(f64, f64)> = sums
            .iter()
            .zip(&centers)
            .map(|(&(w, h, n), &c)| if n == 0 { c } else { (w / n as f64, h / n as f64) })
            .collect();
        if next == centers {
            break;
        }
        centers = next;
    }
    centers.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    Ok(centers
        .iter()
        .map(|&(w, h)| [w.round().max(1.0) as f32, h.round().max(1.0) as f32])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn default_anchors() -> Vec<Anchor> {
        generate_anchors(&crate::config::ModelConfig::default().anchors).unwrap()
    }

    #[test]
    fn anchors_sorted_into_levels() {
        let a = generate_anchors(&[
            [208.0, 208.0],
            [24.0, 24.0],
            [96.0, 96.0],
            [40.0, 40.0],
            [144.0, 144.0],
            [64.0, 64.0],
        ])
        .unwrap();
        let sizes: Vec<(usize, f64)> = a.iter().map(|a| (a.level, a.width)).collect();
        assert_eq!(sizes, vec![(0, 24.0), (0, 40.0), (1, 64.0), (1, 96.0), (2, 144.0), (2, 208.0)]);
        assert!(generate_anchors(&[[1.0, 1.0]; 5]).is_err());
        assert!(generate_anchors(&[[1.0, 0.0]; 6]).is_err());
    }

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let mut sizes = Vec::new();
        for side in [10.0, 20.0, 40.0, 80.0, 160.0, 320.0] {
            for j in 0..5 {
                let d = (j as f64 - 2.0) * 0.01 * side;
                sizes.push((side + d, side - d));
            }
        }
        let a = kmeans_anchors(&sizes, 6, 50).unwrap();
        let sides: Vec<f32> = a.iter().map(|p| p[0]).collect();
        assert_eq!(sides, vec![10.0, 20.0, 40.0, 80.0, 160.0, 320.0]);
        assert!(kmeans_anchors(&sizes[..3], 6, 10).is_err());
    }

    #[test]
    fn decode_reference_cell() {
        let anchors = default_anchors();
        let b = decode_box([0.0; 4], 2, 3, &anchors[4], 32);
        assert_eq!(b, BBox::new(40.0, 8.0, 144.0, 144.0));
        assert_eq!(b.center(), (112.0, 80.0));
    }

    #[test]
    fn decode_boxes_thresholds_and_clips() {
        let anchors = default_anchors();
        let mut cls = Tensor::<f32>::full(Shape::new(1, 4, 2, 2), -10.0);
        let idx = cls.shape().index(0, cls_channel(1, 0), 1, 0);
        cls.data_mut()[idx] = 10.0;
        let idx = cls.shape().index(0, cls_channel(1, 1), 1, 0);
        cls.data_mut()[idx] = 10.0;
        let boxes = Tensor::<f32>::zeros(Shape::new(1, 8, 2, 2));
        let dets = decode_boxes(&cls, &boxes, 0, 2, &anchors, 0.3, (64, 64));
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert_eq!(d.cell.unwrap().slot, 1);
        // center (16, 48), anchor 208 → clipped to the 64×64 image
        assert_eq!(d.bbox, BBox::new(0.0, 0.0, 64.0, 64.0));
    }

    #[test]
    fn nms_cases() {
        let one = vec![Detection::new(BBox::new(1.0, 2.0, 3.0, 4.0), 0.5)];
        assert_eq!(nms(one.clone(), 0.45), one);
        let dup = vec![
            Detection::new(BBox::new(0.0, 0.0, 10.0, 10.0), 0.8),
            Detection::new(BBox::new(0.0, 0.0, 10.0, 10.0), 0.9),
        ];
        let kept = nms(dup, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let pair = vec![
            Detection::new(BBox::new(0.0, 0.0, 10.0, 10.0), 0.9),
            Detection::new(BBox::new(5.0, 0.0, 10.0, 10.0), 0.8),
        ];
        assert_eq!(nms(pair, 0.45).len(), 2);
    }

    #[test]
    fn render_full_and_empty() {
        let mut d = Detection::new(BBox::new(10.0, 20.0, 32.0, 32.0), 0.9);
        d.mask32 = Some(vec![1.0; 1024]);
        let (m, ok) = render_instance_mask(&d, (64, 64));
        assert!(ok);
        assert_eq!(m.area(), 32 * 32);
        assert_eq!(m.bounding_box(), Some(d.bbox));
        d.mask32 = Some(vec![0.0; 1024]);
        assert_eq!(render_instance_mask(&d, (64, 64)).0.area(), 0);
        d.bbox = BBox::new(3.0, 3.0, 0.2, 5.0);
        d.mask32 = Some(vec![1.0; 1024]);
        let (m, ok) = render_instance_mask(&d, (64, 64));
        assert!(!ok);
        assert_eq!(m.area(), 0);
    }
}
