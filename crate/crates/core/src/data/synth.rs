//! Synthetic orchard scenes: a textured foliage background, dark polyline
//! branches and shaded red ellipses standing in for apples, painted far to
//! near so that branches and fruits occlude each other.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AnnotatedImage, DepthImage, Instance};
use crate::config::SynthConfig;
use crate::geom::BinaryMask;
use crate::seed;

const BACKGROUND_DEPTH_MM: f64 = 2500.0;
const DEPTH_NOISE_MM: f64 = 5.0;
const NEAR_MM: (f64, f64) = (700.0, 1400.0);
/// Physical fruit radius used for the depth bump.
const FRUIT_RADIUS_MM: f64 = 40.0;

enum Shape {
    Branch {
        points: Vec<(f64, f64)>,
        half_width: f64,
        color: [f64; 3],
    },
    Fruit {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        color: [f64; 3],
    },
}

struct Object {
    shape: Shape,
    depth: f64,
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn range(rng: &mut ChaCha8Rng, r: [f32; 2]) -> f64 {
    if r[0] == r[1] {
        r[0] as f64
    } else {
        rng.random_range(r[0] as f64..=r[1] as f64)
    }
}

fn count(rng: &mut ChaCha8Rng, r: [u32; 2]) -> usize {
    rng.random_range(r[0]..=r[1]) as usize
}

fn random_branch(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Shape {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    // Enter from a random edge and wander across the frame.
    let (mut x, mut y, mut angle) = match rng.random_range(0..4) {
        0 => (0.0, rng.random_range(0.0..h), 0.0),
        1 => (w, rng.random_range(0.0..h), std::f64::consts::PI),
        2 => (rng.random_range(0.0..w), 0.0, std::f64::consts::FRAC_PI_2),
        _ => (rng.random_range(0.0..w), h, -std::f64::consts::FRAC_PI_2),
    };
    angle += rng.random_range(-0.6..0.6);
    let segments = rng.random_range(3..6);
    let step = w.max(h) / 3.5;
    let mut points = vec![(x, y)];
    for _ in 0..segments {
        angle += rng.random_range(-0.5..0.5);
        x += angle.cos() * step * rng.random_range(0.6..1.2);
        y += angle.sin() * step * rng.random_range(0.6..1.2);
        points.push((x, y));
    }
    let tone = rng.random_range(0.7..1.0);
    Shape::Branch {
        points,
        half_width: range(rng, cfg.branch_width) / 2.0,
        color: [95.0 * tone, 62.0 * tone, 38.0 * tone],
    }
}

/// Fruits stay inside the frame and may overlap an earlier fruit only
/// partially: centers closer than this fraction of the radius sum are
/// redrawn.
const MIN_CENTER_SEPARATION: f64 = 0.8;
const PLACEMENT_TRIES: usize = 20;

fn random_fruit(rng: &mut ChaCha8Rng, cfg: &SynthConfig, placed: &[(f64, f64, f64)]) -> Option<Shape> {
    let r = range(rng, cfg.fruit_radius);
    let color = [
        rng.random_range(175.0..235.0),
        rng.random_range(20.0..70.0),
        rng.random_range(20.0..50.0),
    ];
    let (rx, ry) = (r * rng.random_range(0.9..1.1), r * rng.random_range(0.9..1.1));
    let axis = |extent: u32, radius: f64, rng: &mut ChaCha8Rng| {
        let extent = extent as f64;
        if 2.0 * radius >= extent {
            extent / 2.0
        } else {
            rng.random_range(radius..extent - radius)
        }
    };
    for _ in 0..PLACEMENT_TRIES {
        let (cx, cy) = (axis(cfg.width, rx, rng), axis(cfg.height, ry, rng));
        let clear = placed
            .iter()
            .all(|&(px, py, pr)| ((cx - px).powi(2) + (cy - py).powi(2)).sqrt() >= MIN_CENTER_SEPARATION * (pr + r));
        if clear {
            return Some(Shape::Fruit { cx, cy, rx, ry, color });
        }
    }
    None
}

/// Render one scene. Deterministic in `seed`.
pub fn synth_orchard(seed: u64, cfg: &SynthConfig) -> AnnotatedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width as usize, cfg.height as usize);

    // Foliage background: base hue, three low-frequency waves, pixel noise.
    let base = [
        rng.random_range(50.0..90.0),
        rng.random_range(105.0..150.0),
        rng.random_range(45.0..80.0),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.01..0.06),
                rng.random_range(0.01..0.06),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(8.0..22.0),
            )
        })
        .collect();
    let mut color = vec![[0.0f64; 3]; w * h];
    let mut depth = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let shade: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            let jitter = rng.random_range(-8.0..8.0);
            let i = y * w + x;
            color[i] = [
                base[0] + shade + jitter,
                base[1] + shade * 1.2 + jitter,
                base[2] + shade * 0.8 + jitter,
            ];
            depth[i] = BACKGROUND_DEPTH_MM + 10.0 * shade;
        }
    }

    let n_branches = count(&mut rng, cfg.branch_count);
    let n_fruits = count(&mut rng, cfg.fruit_count);
    let mut objects = Vec::with_capacity(n_branches + n_fruits);
    for _ in 0..n_branches {
        let shape = random_branch(&mut rng, cfg);
        objects.push(Object {
            shape,
            depth: rng.random_range(NEAR_MM.0..NEAR_MM.1),
        });
    }
    let mut placed = Vec::with_capacity(n_fruits);
    for _ in 0..n_fruits {
        let Some(shape) = random_fruit(&mut rng, cfg, &placed) else {
            continue;
        };
        if let Shape::Fruit { cx, cy, rx, ry, .. } = shape {
            placed.push((cx, cy, rx.max(ry)));
        }
        objects.push(Object {
            shape,
            depth: rng.random_range(NEAR_MM.0..NEAR_MM.1),
        });
    }
    // Paint far to near; ties keep creation order.
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[b].depth.total_cmp(&objects[a].depth));

    let mut owner = vec![usize::MAX; w * h];
    for &k in &order {
        let obj = &objects[k];
        match &obj.shape {
            Shape::Branch {
                points,
                half_width,
                color: c,
            } => {
                let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
                for p in points {
                    x0 = x0.min(p.0);
                    y0 = y0.min(p.1);
                    x1 = x1.max(p.0);
                    y1 = y1.max(p.1);
                }
                let xs = (x0 - half_width).floor().max(0.0) as usize..((x1 + half_width).ceil().max(0.0) as usize).min(w);
                let ys = (y0 - half_width).floor().max(0.0) as usize..((y1 + half_width).ceil().max(0.0) as usize).min(h);
                for y in ys {
                    for x in xs.clone() {
                        let p = (x as f64 + 0.5, y as f64 + 0.5);
                        let d = points.windows(2).map(|s| segment_distance(p, s[0], s[1])).fold(f64::MAX, f64::min);
                        if d <= *half_width {
                            let i = y * w + x;
                            let rim = 1.0 - 0.35 * (d / half_width).powi(2);
                            let grain = rng.random_range(-10.0..10.0);
                            color[i] = [c[0] * rim + grain, c[1] * rim + grain, c[2] * rim + grain * 0.5];
                            depth[i] = obj.depth;
                            owner[i] = k;
                        }
                    }
                }
            }
            Shape::Fruit { cx, cy, rx, ry, color: c } => {
                let xs = (cx - rx).floor().max(0.0) as usize..((cx + rx).ceil().max(0.0) as usize).min(w);
                let ys = (cy - ry).floor().max(0.0) as usize..((cy + ry).ceil().max(0.0) as usize).min(h);
                for y in ys {
                    for x in xs.clone() {
                        let dx = (x as f64 + 0.5 - cx) / rx;
                        let dy = (y as f64 + 0.5 - cy) / ry;
                        let d2 = dx * dx + dy * dy;
                        if d2 <= 1.0 {
                            let i = y * w + x;
                            let bulge = (1.0 - d2).sqrt();
                            let light = 0.55 + 0.45 * bulge;
                            let hx = dx + 0.35;
                            let hy = dy + 0.35;
                            let spec = 70.0 * (-(hx * hx + hy * hy) / 0.05).exp();
                            let grain = rng.random_range(-6.0..6.0);
                            color[i] = [
                                c[0] * light + spec + grain,
                                c[1] * light + spec + grain,
                                c[2] * light + spec + grain,
                            ];
                            depth[i] = obj.depth - FRUIT_RADIUS_MM * bulge;
                            owner[i] = k;
                        }
                    }
                }
            }
        }
    }

    let mut rgb = RgbImage::new(w as u32, h as u32);
    for (i, px) in rgb.pixels_mut().enumerate() {
        *px = Rgb(color[i].map(|v| v.round().clamp(0.0, 255.0) as u8));
    }
    let noise = Normal::new(0.0, DEPTH_NOISE_MM).expect("valid sigma");
    let mut depth_img = DepthImage::new(w as u32, h as u32);
    for (i, px) in depth_img.pixels_mut().enumerate() {
        px.0[0] = (depth[i] + noise.sample(&mut rng)).round().clamp(1.0, u16::MAX as f64) as u16;
    }

    let mut branch_mask = BinaryMask::new(w, h);
    let mut instances = Vec::new();
    for (k, obj) in objects.iter().enumerate() {
        let mut mask = BinaryMask::new(w, h);
        for (i, &o) in owner.iter().enumerate() {
            if o == k {
                mask.data[i] = true;
            }
        }
        match obj.shape {
            Shape::Branch { .. } => {
                for (b, m) in branch_mask.data.iter_mut().zip(&mask.data) {
                    *b |= *m;
                }
            }
            Shape::Fruit { .. } => {
                if mask.area() >= cfg.min_visible_area as usize {
                    let bbox = mask.bounding_box().expect("non-empty mask");
                    instances.push(Instance { bbox, mask });
                }
            }
        }
    }
    AnnotatedImage {
        rgb,
        depth: Some(depth_img),
        instances,
        branch_mask,
    }
}

/// `count` scenes with independent per-image seeds derived from `seed`.
pub fn synth_dataset(seed: u64, count: usize, cfg: &SynthConfig) -> Vec<AnnotatedImage> {
    (0..count).map(|i| synth_orchard(seed::derive(seed, i as u64), cfg)).collect()
}
