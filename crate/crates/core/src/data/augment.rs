//! Geometric and photometric augmentation plus the two-level scale
//! amplifier. Geometric transforms remap pixels, masks, depth and boxes
//! together; photometric jitter touches only pixels inside annotated
//! regions.

use image::{ImageBuffer, Pixel, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnnotatedImage, Instance};
use crate::config::AugmentPolicy;
use crate::geom::{BBox, BinaryMask};

/// Instances with fewer visible pixels after a crop are dropped.
pub const MIN_VISIBLE_AREA: usize = 30;

fn remap_mask(m: &BinaryMask, w: usize, h: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> BinaryMask {
    let mut out = BinaryMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src(x, y);
            out.data[y * w + x] = m.get(sx, sy);
        }
    }
    out
}

fn remap_image<P: Pixel>(
    img: &ImageBuffer<P, Vec<P::Subpixel>>,
    w: usize,
    h: usize,
    src: impl Fn(usize, usize) -> (usize, usize),
) -> ImageBuffer<P, Vec<P::Subpixel>> {
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (sx, sy) = src(x as usize, y as usize);
        *img.get_pixel(sx as u32, sy as u32)
    })
}

fn remap(
    img: &AnnotatedImage,
    w: usize,
    h: usize,
    src: impl Fn(usize, usize) -> (usize, usize) + Copy,
    bbox: impl Fn(&BBox) -> BBox,
) -> AnnotatedImage {
    AnnotatedImage {
        rgb: remap_image(&img.rgb, w, h, src),
        depth: img.depth.as_ref().map(|d| remap_image(d, w, h, src)),
        instances: img
            .instances
            .iter()
            .map(|i| Instance {
                bbox: bbox(&i.bbox),
                mask: remap_mask(&i.mask, w, h, src),
            })
            .collect(),
        branch_mask: remap_mask(&img.branch_mask, w, h, src),
    }
}

/// Mirror left to right: box `(x, y, w, h)` becomes `(W − x − w, y, w, h)`.
pub fn hflip(img: &AnnotatedImage) -> AnnotatedImage {
    let (w, h) = (img.width(), img.height());
    remap(img, w, h, |x, y| (w - 1 - x, y), |b| BBox::new(w as f64 - b.x - b.w, b.y, b.w, b.h))
}

/// Rotate clockwise by `k` quarter turns.
pub fn rot90(img: &AnnotatedImage, k: usize) -> AnnotatedImage {
    let mut out = img.clone();
    for _ in 0..k % 4 {
        let (w, h) = (out.width(), out.height());
        // Clockwise: source (x, y) lands at (h − 1 − y, x).
        out = remap(
            &out,
            h,
            w,
            |x, y| (y, h - 1 - x),
            |b| BBox::new(h as f64 - b.y - b.h, b.x, b.h, b.w),
        );
    }
    out
}

fn rgb_to_hsv(c: [f64; 3]) -> [f64; 3] {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == c[0] {
        60.0 * ((c[1] - c[2]) / d).rem_euclid(6.0)
    } else if max == c[1] {
        60.0 * ((c[2] - c[0]) / d + 2.0)
    } else {
        60.0 * ((c[0] - c[1]) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

#[derive(Copy, Clone, Debug)]
struct Jitter {
    hue: f64,
    saturation: f64,
    value: f64,
    brightness: f64,
    contrast: f64,
}

impl Jitter {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            hue: rng.random_range(-10.0..=10.0),
            saturation: rng.random_range(-0.2..=0.2),
            value: rng.random_range(-0.2..=0.2),
            brightness: rng.random_range(-0.15..=0.15),
            contrast: rng.random_range(-0.15..=0.15),
        }
    }

    fn apply(&self, px: Rgb<u8>) -> Rgb<u8> {
        let c = px.0.map(|v| v as f64 / 255.0);
        let [h, s, v] = rgb_to_hsv(c);
        let hsv = [
            h + self.hue,
            (s * (1.0 + self.saturation)).clamp(0.0, 1.0),
            (v * (1.0 + self.value)).clamp(0.0, 1.0),
        ];
        let rgb = hsv_to_rgb(hsv);
        Rgb(rgb.map(|v| {
            let v = ((v * (1.0 + self.brightness)) - 0.5) * (1.0 + self.contrast) + 0.5;
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    }
}

/// Jitter hue, saturation, value, brightness and contrast independently
/// per annotated region (each fruit, and the branches as one region).
/// Pixels outside every mask are left untouched.
pub fn inmask_color(img: &AnnotatedImage, rng: &mut ChaCha8Rng) -> AnnotatedImage {
    let mut out = img.clone();
    let w = img.width();
    let regions = img.instances.iter().map(|i| &i.mask).chain(std::iter::once(&img.branch_mask));
    let mut done = vec![false; w * img.height()];
    for mask in regions {
        let jitter = Jitter::sample(rng);
        for (i, &on) in mask.data.iter().enumerate() {
            if on && !done[i] {
                done[i] = true;
                let (x, y) = ((i % w) as u32, (i / w) as u32);
                out.rgb.put_pixel(x, y, jitter.apply(*img.rgb.get_pixel(x, y)));
            }
        }
    }
    out
}

/// Flip, quarter-turn rotation and in-mask color jitter as enabled by
/// `policy`. Non-square images only rotate by 0 or 180 degrees so the
/// size is preserved.
pub fn augment(img: &AnnotatedImage, seed: u64, policy: &AugmentPolicy) -> AnnotatedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    if policy.hflip && rng.random_bool(0.5) {
        out = hflip(&out);
    }
    if policy.rot90 {
        let k = if out.width() == out.height() {
            rng.random_range(0..4)
        } else {
            2 * rng.random_range(0..2)
        };
        out = rot90(&out, k);
    }
    if policy.inmask_color {
        out = inmask_color(&out, &mut rng);
    }
    out
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Zoom {
    X2 = 2,
    X4 = 4,
}

/// Median box area over every instance of a dataset (0 when empty).
pub fn median_box_area(images: &[AnnotatedImage]) -> f64 {
    let mut areas: Vec<f64> = images.iter().flat_map(|i| i.instances.iter().map(|x| x.bbox.area())).collect();
    if areas.is_empty() {
        return 0.0;
    }
    areas.sort_by(f64::total_cmp);
    let n = areas.len();
    if n % 2 == 1 {
        areas[n / 2]
    } else {
        0.5 * (areas[n / 2 - 1] + areas[n / 2])
    }
}

/// Crop a window of `1/zoom` the image size centered on `target`'s box
/// (shifted inside the image) and blow it back up to full size by pixel
/// replication. Boxes are recomputed from the remapped masks; instances
/// left below [`MIN_VISIBLE_AREA`] pixels are dropped.
pub fn zoom_crop(img: &AnnotatedImage, target: usize, zoom: Zoom) -> AnnotatedImage {
    let (w, h) = (img.width(), img.height());
    let z = zoom as usize;
    let (ww, wh) = ((w / z).max(1), (h / z).max(1));
    let (cx, cy) = img.instances[target].bbox.center();
    let x0 = (cx - ww as f64 / 2.0).round().clamp(0.0, (w - ww) as f64) as usize;
    let y0 = (cy - wh as f64 / 2.0).round().clamp(0.0, (h - wh) as f64) as usize;
    let src = move |x: usize, y: usize| (x0 + x * ww / w, y0 + y * wh / h);
    let mut out = remap(img, w, h, src, |b| *b);
    out.instances.retain_mut(|inst| {
        if inst.mask.area() < MIN_VISIBLE_AREA {
            return false;
        }
        inst.bbox = inst.mask.bounding_box().expect("non-empty mask");
        true
    });
    out
}

/// The two-level scale amplifier: zoom 2× or 4× (uniformly) on a random
/// instance smaller than `median_area`. Images without such an instance
/// are returned unchanged.
pub fn scale_amplifier(img: &AnnotatedImage, seed: u64, median_area: f64) -> AnnotatedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small: Vec<usize> = (0..img.instances.len())
        .filter(|&i| img.instances[i].bbox.area() < median_area)
        .collect();
    if small.is_empty() {
        return img.clone();
    }
    let target = small[rng.random_range(0..small.len())];
    let zoom = if rng.random_bool(0.5) { Zoom::X2 } else { Zoom::X4 };
    zoom_crop(img, target, zoom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for c in [[0.2, 0.4, 0.9], [1.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.1, 0.9, 0.3]] {
            let back = hsv_to_rgb(rgb_to_hsv(c));
            for k in 0..3 {
                assert!((back[k] - c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn median_of_even_count() {
        let mk = |w: f64| Instance {
            bbox: BBox::new(0.0, 0.0, w, 1.0),
            mask: BinaryMask::new(1, 1),
        };
        let img = AnnotatedImage {
            rgb: image::RgbImage::new(1, 1),
            depth: None,
            instances: vec![mk(1.0), mk(5.0), mk(3.0), mk(10.0)],
            branch_mask: BinaryMask::new(1, 1),
        };
        assert_eq!(median_box_area(&[img]), 4.0);
    }
}
