use dasnet_core::decode::{decode_box, encode_box, nms, render_instance_mask, Anchor, CENTER_EPS};
use dasnet_core::{BBox, Detection};
use proptest::prelude::*;

fn candidate() -> impl Strategy<Value = Detection> {
    (0.0..200.0f64, 0.0..200.0f64, 1.0..80.0f64, 1.0..80.0f64, 0.0..1.0f64)
        // Coarse scores so ties actually occur.
        .prop_map(|(x, y, w, h, s)| Detection::new(BBox::new(x.round(), y.round(), w.round(), h.round()), (s * 8.0).round() / 8.0))
}

fn same_boxes(a: &[Detection], b: &[Detection]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bbox == y.bbox && x.score == y.score)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn nms_is_idempotent_subset_and_separated(cands in prop::collection::vec(candidate(), 0..40), thr in 0.1..0.9f64) {
        let kept = nms(cands.clone(), thr);
        let again = nms(kept.clone(), thr);
        prop_assert!(same_boxes(&kept, &again));
        for k in &kept {
            prop_assert!(cands.iter().any(|c| c.bbox == k.bbox && c.score == k.score));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.bbox.iou(&b.bbox) < thr);
            }
        }
        // Every suppressed candidate overlaps some kept box at least as
        // well-ranked as itself.
        for c in &cands {
            if !kept.iter().any(|k| k.bbox == c.bbox && k.score == c.score) {
                prop_assert!(kept.iter().any(|k| k.score >= c.score && k.bbox.iou(&c.bbox) >= thr));
            }
        }
    }

    #[test]
    fn encode_decode_round_trip(
        fx in CENTER_EPS..1.0 - CENTER_EPS,
        fy in CENTER_EPS..1.0 - CENTER_EPS,
        w in 2.0..300.0f64,
        h in 2.0..300.0f64,
        row in 0usize..50,
        col in 0usize..50,
        level in 0usize..3,
    ) {
        let stride = [8, 16, 32][level];
        let anchor = Anchor { level, slot: 0, width: 40.0, height: 30.0 };
        let s = stride as f64;
        let b = BBox::from_center((col as f64 + fx) * s, (row as f64 + fy) * s, w, h);
        let t = encode_box(&b, row, col, &anchor, stride);
        let back = decode_box(t, row, col, &anchor, stride);
        for (u, v) in [(back.x, b.x), (back.y, b.y), (back.w, b.w), (back.h, b.h)] {
            prop_assert!((u - v).abs() < 1e-5, "{back:?} vs {b:?}");
        }
        let t2 = encode_box(&back, row, col, &anchor, stride);
        for k in 0..4 {
            prop_assert!((t[k] - t2[k]).abs() < 1e-5);
        }
    }
}

#[test]
fn nms_tie_break_prefers_left_then_top() {
    let a = Detection::new(BBox::new(10.0, 0.0, 20.0, 20.0), 0.8);
    let b = Detection::new(BBox::new(9.0, 0.0, 20.0, 20.0), 0.8);
    let kept = nms(vec![a, b], 0.5);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].bbox.x, 9.0);
}

#[test]
fn left_half_mask_renders_left_half_of_box() {
    let mut probs = vec![0.0f32; 32 * 32];
    for row in probs.chunks_mut(32) {
        row[..16].fill(1.0);
    }
    let mut det = Detection::new(BBox::new(100.0, 50.0, 64.0, 64.0), 0.9);
    det.mask32 = Some(probs);
    let (mask, ok) = render_instance_mask(&det, (416, 416));
    assert!(ok);
    for y in 0..416 {
        let cols = (0..416).filter(|&x| mask.get(x, y)).count();
        if (50..114).contains(&y) {
            assert!((31..=33).contains(&cols), "row {y}: {cols}");
            assert!(mask.get(100, y) && !mask.get(163, y));
        } else {
            assert_eq!(cols, 0);
        }
    }
}
