//! Detection and segmentation metrics: greedy matching, precision /
//! recall / F1, box IoU, instance mask MIoU and semantic MIoU.

use serde::{Deserialize, Serialize};

use crate::data::AnnotatedImage;
use crate::decode::Detection;
use crate::error::{Error, Result};
use crate::geom::{BBox, BinaryMask};
use crate::model::Prediction;

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct MatchedPair {
    pub detection: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matching {
    pub counts: MatchCounts,
    pub pairs: Vec<MatchedPair>,
}

/// Visit detections by descending score (stable on index); each becomes a
/// true positive iff its best-IoU unmatched ground truth reaches
/// `iou_threshold`, which is then consumed.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> Matching {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut m = Matching::default();
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = dets[d].bbox.iou(gt);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) if iou >= iou_threshold => {
                taken[g] = true;
                m.counts.tp += 1;
                m.pairs.push(MatchedPair {
                    detection: d,
                    ground_truth: g,
                    iou,
                });
            }
            _ => m.counts.fp += 1,
        }
    }
    m.counts.fn_ = gts.len() - m.counts.tp;
    m
}

pub fn precision_recall_f1(c: MatchCounts) -> (f64, f64, f64) {
    let p = if c.tp + c.fp == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let r = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Per-class intersection and union pixel counts over {background, branch}.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct SemanticCounts {
    pub intersection: [u64; 2],
    pub union: [u64; 2],
}

impl SemanticCounts {
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::config(format!("label maps differ in size: {} vs {}", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (usize::from(p != 0), usize::from(g != 0));
            for class in 0..2 {
                let (pc, gc) = (p == class, g == class);
                self.intersection[class] += u64::from(pc && gc);
                self.union[class] += u64::from(pc || gc);
            }
        }
        Ok(())
    }

    /// Mean of the two class IoUs; a class absent from both maps counts 1.
    pub fn miou(&self) -> f64 {
        (0..2)
            .map(|c| {
                if self.union[c] == 0 {
                    1.0
                } else {
                    self.intersection[c] as f64 / self.union[c] as f64
                }
            })
            .sum::<f64>()
            / 2.0
    }
}

pub fn semantic_miou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    let mut c = SemanticCounts::default();
    c.accumulate(pred, gt)?;
    Ok(c.miou())
}

/// Mean mask IoU over matched pairs; 0 when there are none.
pub fn instance_miou(pairs: &[(&BinaryMask, &BinaryMask)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(a, b)| a.iou(b)).sum::<f64>() / pairs.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_box_iou: f64,
    pub instance_miou: f64,
    pub semantic_miou_branch: f64,
    pub counts: MatchCounts,
    pub per_image: Vec<MatchCounts>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-column plain-text summary.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<8} {:>6} {:>6} {:>6} {:>10} {:>10} {:>10} {:>10} {:>14}\n",
            "images", "TP", "FP", "FN", "precision", "recall", "F1", "box IoU", "MIoU instance"
        ));
        s.push_str(&format!(
            "{:<8} {:>6} {:>6} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>14.4}\n",
            self.images,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_,
            self.precision,
            self.recall,
            self.f1,
            self.mean_box_iou,
            self.instance_miou
        ));
        s.push_str(&format!("{:<24} {:>10.4}\n", "MIoU branch", self.semantic_miou_branch));
        s
    }
}

/// Evaluate predictions against ground truth, image by image in order.
/// Counts and mask statistics are pooled over the whole set; semantic
/// MIoU pools pixel counts across images before dividing.
pub fn evaluate(preds: &[Prediction], gts: &[AnnotatedImage], match_iou: f64) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::config(format!("{} predictions for {} images", preds.len(), gts.len())));
    }
    let mut counts = MatchCounts::default();
    let mut per_image = Vec::with_capacity(gts.len());
    let mut box_ious = Vec::new();
    let mut mask_ious = Vec::new();
    let mut sem = SemanticCounts::default();
    for (p, gt) in preds.iter().zip(gts) {
        if (p.width, p.height) != (gt.width(), gt.height()) {
            return Err(Error::config("prediction size differs from its image"));
        }
        let boxes: Vec<BBox> = gt.instances.iter().map(|i| i.bbox).collect();
        let m = match_detections(&p.detections, &boxes, match_iou);
        for pair in &m.pairs {
            box_ious.push(pair.iou);
            let empty = BinaryMask::new(gt.width(), gt.height());
            let pm = p.detections[pair.detection].rendered_mask.as_ref().unwrap_or(&empty);
            mask_ious.push(pm.iou(&gt.instances[pair.ground_truth].mask));
        }
        counts += m.counts;
        per_image.push(m.counts);
        let gt_labels: Vec<u8> = gt.branch_mask.data.iter().map(|&v| u8::from(v)).collect();
        sem.accumulate(&p.branch_map, &gt_labels)?;
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let (precision, recall, f1) = precision_recall_f1(counts);
    Ok(EvalReport {
        images: gts.len(),
        precision,
        recall,
        f1,
        mean_box_iou: mean(&box_ious),
        instance_miou: mean(&mask_ious),
        semantic_miou_branch: sem.miou(),
        counts,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_f1() {
        let (p, r, f) = precision_recall_f1(MatchCounts { tp: 8, fp: 2, fn_: 4 });
        assert!((p - 0.8).abs() < 1e-12);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert!((f - 0.727273).abs() < 1e-6);
        assert_eq!(precision_recall_f1(MatchCounts::default()), (0.0, 0.0, 0.0));
        assert_eq!(precision_recall_f1(MatchCounts { tp: 3, fp: 0, fn_: 0 }), (1.0, 1.0, 1.0));
    }

    #[test]
    fn two_detections_one_truth() {
        let gt = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let dets = vec![
            Detection::new(BBox::new(0.0, 0.0, 10.0, 10.0), 0.7),
            Detection::new(BBox::new(1.0, 0.0, 10.0, 10.0), 0.9),
        ];
        let m = match_detections(&dets, &gt, 0.5);
        assert_eq!(m.counts, MatchCounts { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(m.pairs[0].detection, 1);
        assert_eq!(match_detections(&[], &gt, 0.5).counts.fn_, 1);
    }

    #[test]
    fn semantic_quadrants() {
        // gt branch = left column, pred branch = top row of a 2×2 image.
        let gt = [1, 0, 1, 0];
        let pred = [1, 1, 0, 0];
        assert!((semantic_miou(&pred, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(semantic_miou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(semantic_miou(&[0, 1], &[1, 0]).unwrap(), 0.0);
        assert_eq!(semantic_miou(&[0, 0], &[0, 0]).unwrap(), 1.0);
        assert!(semantic_miou(&[0], &[0, 0]).is_err());
    }

    #[test]
    fn instance_mean() {
        let mk = |bits: &[bool]| BinaryMask::from_vec(bits.len(), 1, bits.to_vec()).unwrap();
        let a = mk(&[true, true, true, false, false]);
        let b = mk(&[true, true, true, true, true]);
        assert_eq!(instance_miou(&[]), 0.0);
        assert!((instance_miou(&[(&a, &b), (&a, &a)]) - 0.8).abs() < 1e-12);
    }
}
