use dasnet_core::data::{AnnotatedImage, Instance};
use dasnet_core::metrics::{box_iou, evaluate, instance_miou, match_detections, precision_recall_f1, semantic_miou, MatchCounts};
use dasnet_core::model::Prediction;
use dasnet_core::{BBox, BinaryMask, Detection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: u64 = 200;

fn rand_box(rng: &mut ChaCha8Rng, max: u32) -> BBox {
    let x = rng.random_range(0..max - 2);
    let y = rng.random_range(0..max - 2);
    let w = rng.random_range(1..=max - x);
    let h = rng.random_range(1..=max - y);
    BBox::new(x as f64, y as f64, w as f64, h as f64)
}

/// IoU by counting unit cells of integer boxes.
fn cell_iou(a: &BBox, b: &BBox) -> f64 {
    let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x && x < bx.right() && y >= bx.y && y < bx.bottom();
    let (mut inter, mut union) = (0u32, 0u32);
    for y in 0..64 {
        for x in 0..64 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (ia, ib) = (inside(a, px, py), inside(b, px, py));
            inter += u32::from(ia && ib);
            union += u32::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

#[test]
fn box_iou_matches_cell_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..CASES {
        let (a, b) = (rand_box(&mut rng, 64), rand_box(&mut rng, 64));
        assert!((box_iou(&a, &b) - cell_iou(&a, &b)).abs() < 1e-9, "{a:?} {b:?}");
    }
}

#[test]
fn ratios_match_count_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..CASES {
        let c = MatchCounts {
            tp: rng.random_range(0..30),
            fp: rng.random_range(0..30),
            fn_: rng.random_range(0..30),
        };
        let (p, r, f) = precision_recall_f1(c);
        let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
        let f_oracle = if c.tp == 0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        assert!((f - f_oracle).abs() < 1e-9);
        if c.tp + c.fp > 0 {
            assert!((p - tp / (tp + fp)).abs() < 1e-9);
        }
        if c.tp + c.fn_ > 0 {
            assert!((r - tp / (tp + fn_)).abs() < 1e-9);
        }
    }
    let (_, _, f) = precision_recall_f1(MatchCounts { tp: 8, fp: 2, fn_: 4 });
    assert!((f - 0.727273).abs() < 1e-6);
}

/// Ground truths on a coarse grid so each detection overlaps at most one;
/// then TP is the number of truths hit by some detection at IoU ≥ 0.5.
#[test]
fn matching_counts_on_separated_truths() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..CASES {
        let gts: Vec<BBox> = (0..rng.random_range(0..6))
            .map(|k| BBox::new(100.0 * k as f64, 0.0, 40.0, 40.0))
            .collect();
        let mut dets = Vec::new();
        for _ in 0..rng.random_range(0..10) {
            let k = rng.random_range(0..6) as f64;
            let dx = rng.random_range(-20.0..20.0);
            let dy = rng.random_range(-20.0..20.0);
            dets.push(Detection::new(
                BBox::new(100.0 * k + dx, dy, 40.0, 40.0),
                rng.random_range(0.0..1.0),
            ));
        }
        let m = match_detections(&dets, &gts, 0.5);
        let tp = gts.iter().filter(|g| dets.iter().any(|d| d.bbox.iou(g) >= 0.5)).count();
        assert_eq!(
            m.counts,
            MatchCounts {
                tp,
                fp: dets.len() - tp,
                fn_: gts.len() - tp
            }
        );
    }
}

fn rand_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> BinaryMask {
    BinaryMask::from_vec(w, h, (0..w * h).map(|_| rng.random_bool(p)).collect()).unwrap()
}

fn set_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let sa: std::collections::BTreeSet<usize> = (0..a.data.len()).filter(|&i| a.data[i]).collect();
    let sb: std::collections::BTreeSet<usize> = (0..b.data.len()).filter(|&i| b.data[i]).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        1.0
    } else {
        sa.intersection(&sb).count() as f64 / union as f64
    }
}

#[test]
fn semantic_and_instance_miou_match_set_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..CASES {
        let (w, h) = (rng.random_range(1..12), rng.random_range(1..12));
        let p = rng.random_range(0.0..1.0);
        let (pred, gt) = (rand_mask(&mut rng, w, h, p), rand_mask(&mut rng, w, h, p));
        let inv = |m: &BinaryMask| BinaryMask::from_vec(w, h, m.data.iter().map(|v| !v).collect()).unwrap();
        let oracle = (set_iou(&pred, &gt) + set_iou(&inv(&pred), &inv(&gt))) / 2.0;
        let labels = |m: &BinaryMask| m.data.iter().map(|&v| u8::from(v)).collect::<Vec<_>>();
        assert!((semantic_miou(&labels(&pred), &labels(&gt)).unwrap() - oracle).abs() < 1e-9);

        let pairs: Vec<(BinaryMask, BinaryMask)> = (0..rng.random_range(1..5))
            .map(|_| (rand_mask(&mut rng, w, h, 0.4), rand_mask(&mut rng, w, h, 0.4)))
            .collect();
        let refs: Vec<(&BinaryMask, &BinaryMask)> = pairs.iter().map(|(a, b)| (a, b)).collect();
        let mean = pairs.iter().map(|(a, b)| set_iou(a, b)).sum::<f64>() / pairs.len() as f64;
        assert!((instance_miou(&refs) - mean).abs() < 1e-9);
    }
}

#[test]
fn perfect_predictions_score_one() {
    let mut mask = BinaryMask::new(20, 20);
    for y in 2..8 {
        for x in 3..9 {
            mask.set(x, y, true);
        }
    }
    let mut branch = BinaryMask::new(20, 20);
    branch.set(15, 15, true);
    let img = AnnotatedImage {
        rgb: image::RgbImage::new(20, 20),
        depth: None,
        instances: vec![Instance {
            bbox: BBox::new(3.0, 2.0, 6.0, 6.0),
            mask: mask.clone(),
        }],
        branch_mask: branch.clone(),
    };
    let mut det = Detection::new(BBox::new(3.0, 2.0, 6.0, 6.0), 0.9);
    det.rendered_mask = Some(mask);
    let pred = Prediction {
        detections: vec![det],
        width: 20,
        height: 20,
        branch_map: branch.data.iter().map(|&v| u8::from(v)).collect(),
        degenerate: 0,
    };
    let r = evaluate(&[pred], &[img], 0.5).unwrap();
    assert_eq!(
        (r.f1, r.instance_miou, r.semantic_miou_branch, r.mean_box_iou),
        (1.0, 1.0, 1.0, 1.0)
    );
}
