//! Ground-truth to grid assignment.
//!
//! Each instance goes to the anchor with the best shape IoU (boxes compared
//! with aligned centers), at the grid cell containing its center. When
//! that slot is already held by a larger instance the next-best anchor
//! with a free slot is used. Other anchors whose shape IoU exceeds the
//! ignore threshold contribute no objectness loss at the instance's cell.

use crate::autodiff::Cell;
use crate::data::{AnnotatedImage, Instance};
use crate::decode::{encode_box, Anchor};
use crate::fpn::{LEVELS, LEVEL_STRIDES};
use crate::heads::{box_channel, cls_channel, ANCHORS_PER_LEVEL, MASK_SIZE, NUM_CLASSES};

/// Boxes narrower or shorter than this are not assigned.
pub const MIN_BOX_SIDE: f64 = 2.0;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Positive {
    pub slot: Slot,
    /// Index into the image's instance list.
    pub instance: usize,
    pub box_target: [f64; 4],
}

/// 32×32 fruit/background labels for one grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTarget {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub instance: usize,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageTargets {
    pub positives: Vec<Positive>,
    pub ignored: Vec<Slot>,
    pub masks: Vec<MaskTarget>,
    /// Instances too small or without any free slot.
    pub skipped: usize,
}

pub fn grid_size(input_size: (usize, usize), level: usize) -> (usize, usize) {
    (input_size.1 / LEVEL_STRIDES[level], input_size.0 / LEVEL_STRIDES[level])
}

fn cell_of(inst: &Instance, level: usize, input_size: (usize, usize)) -> (usize, usize) {
    let stride = LEVEL_STRIDES[level] as f64;
    let (rows, cols) = grid_size(input_size, level);
    let (cx, cy) = inst.bbox.center();
    let row = ((cy / stride).floor().max(0.0) as usize).min(rows - 1);
    let col = ((cx / stride).floor().max(0.0) as usize).min(cols - 1);
    (row, col)
}

/// Crop the instance mask to its box and sample it to 32×32 (nearest).
pub fn mask_target(inst: &Instance) -> Vec<u8> {
    let b = &inst.bbox;
    let m = &inst.mask;
    let mut out = Vec::with_capacity(MASK_SIZE * MASK_SIZE);
    for v in 0..MASK_SIZE {
        let y = (b.y + (v as f64 + 0.5) * b.h / MASK_SIZE as f64).floor();
        for u in 0..MASK_SIZE {
            let x = (b.x + (u as f64 + 0.5) * b.w / MASK_SIZE as f64).floor();
            let inside = x >= 0.0 && y >= 0.0 && (x as usize) < m.width && (y as usize) < m.height;
            out.push(u8::from(inside && m.get(x as usize, y as usize)));
        }
    }
    out
}

/// `input_size` is `(width, height)`.
pub fn assign_targets(instances: &[Instance], anchors: &[Anchor], input_size: (usize, usize), ignore_iou: f64) -> ImageTargets {
    let mut t = ImageTargets::default();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| instances[b].bbox.area().total_cmp(&instances[a].bbox.area()));
    let mut taken: Vec<Slot> = Vec::new();
    let mut ignored: Vec<Slot> = Vec::new();
    for i in order {
        let inst = &instances[i];
        if inst.bbox.w < MIN_BOX_SIDE || inst.bbox.h < MIN_BOX_SIDE {
            log::warn!("skipping {}x{} instance below the minimum box side", inst.bbox.w, inst.bbox.h);
            t.skipped += 1;
            continue;
        }
        let mut ranked: Vec<(usize, f64)> = anchors
            .iter()
            .enumerate()
            .map(|(k, a)| (k, a.shape_iou(inst.bbox.w, inst.bbox.h)))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut assigned = None;
        for &(k, _) in &ranked {
            let a = &anchors[k];
            let (row, col) = cell_of(inst, a.level, input_size);
            let slot = Slot {
                level: a.level,
                row,
                col,
                anchor: a.slot,
            };
            if !taken.contains(&slot) {
                assigned = Some((k, slot));
                break;
            }
        }
        let Some((k, slot)) = assigned else {
            t.skipped += 1;
            continue;
        };
        taken.push(slot);
        let a = &anchors[k];
        t.positives.push(Positive {
            slot,
            instance: i,
            box_target: encode_box(&inst.bbox, slot.row, slot.col, a, LEVEL_STRIDES[a.level]),
        });
        if !t.masks.iter().any(|m| (m.level, m.row, m.col) == (slot.level, slot.row, slot.col)) {
            t.masks.push(MaskTarget {
                level: slot.level,
                row: slot.row,
                col: slot.col,
                instance: i,
                labels: mask_target(inst),
            });
        }
        for &(j, iou) in &ranked {
            if j != k && iou > ignore_iou {
                let b = &anchors[j];
                let (row, col) = cell_of(inst, b.level, input_size);
                ignored.push(Slot {
                    level: b.level,
                    row,
                    col,
                    anchor: b.slot,
                });
            }
        }
    }
    ignored.sort();
    ignored.dedup();
    ignored.retain(|s| !taken.contains(s));
    t.ignored = ignored;
    t
}

/// Flattened training targets for one pyramid level of a batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelTargets {
    /// One entry per element of the `cls` output: 1 positive, 0 negative,
    /// −1 ignored.
    pub cls: Vec<i8>,
    /// `(flat index into the box output, target)`.
    pub boxes: Vec<(usize, f64)>,
    pub mask_cells: Vec<Cell>,
    /// `k·32·32` labels, one block per mask cell.
    pub mask_labels: Vec<i16>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetTensors {
    pub levels: Vec<LevelTargets>,
    /// `n·H·W` branch labels.
    pub semantic: Vec<i16>,
    pub positives: usize,
    pub mask_cells: usize,
}

pub fn build_targets(images: &[&AnnotatedImage], anchors: &[Anchor], input_size: (usize, usize), ignore_iou: f64) -> TargetTensors {
    let n = images.len();
    let cls_c = ANCHORS_PER_LEVEL * (1 + NUM_CLASSES);
    let box_c = ANCHORS_PER_LEVEL * 4;
    let mut levels: Vec<LevelTargets> = (0..LEVELS)
        .map(|l| {
            let (h, w) = grid_size(input_size, l);
            let mut cls = vec![-1i8; n * cls_c * h * w];
            for b in 0..n {
                for a in 0..ANCHORS_PER_LEVEL {
                    let base = (b * cls_c + cls_channel(a, 0)) * h * w;
                    cls[base..base + h * w].fill(0);
                }
            }
            LevelTargets {
                cls,
                ..LevelTargets::default()
            }
        })
        .collect();
    let mut out = TargetTensors::default();
    for (b, img) in images.iter().enumerate() {
        let t = assign_targets(&img.instances, anchors, input_size, ignore_iou);
        for s in &t.ignored {
            let (h, w) = grid_size(input_size, s.level);
            levels[s.level].cls[((b * cls_c + cls_channel(s.anchor, 0)) * h + s.row) * w + s.col] = -1;
        }
        for p in &t.positives {
            let s = p.slot;
            let (h, w) = grid_size(input_size, s.level);
            let lt = &mut levels[s.level];
            for k in 0..1 + NUM_CLASSES {
                lt.cls[((b * cls_c + cls_channel(s.anchor, k)) * h + s.row) * w + s.col] = 1;
            }
            for k in 0..4 {
                lt.boxes
                    .push((((b * box_c + box_channel(s.anchor, k)) * h + s.row) * w + s.col, p.box_target[k]));
            }
        }
        for m in t.masks {
            let lt = &mut levels[m.level];
            lt.mask_cells.push((b, m.row, m.col));
            lt.mask_labels.extend(m.labels.iter().map(|&v| v as i16));
        }
        out.positives += t.positives.len();
        out.semantic.extend(img.branch_mask.data.iter().map(|&v| i16::from(v)));
    }
    out.mask_cells = levels.iter().map(|l| l.mask_cells.len()).sum();
    out.levels = levels;
    out
}
