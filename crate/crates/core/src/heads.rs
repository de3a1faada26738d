//! Per-level detection head (classification, box regression and mask
//! seed subnets), the per-cell mask decoder, and the semantic branch head.

use crate::autodiff::{Activation, Graph, MergeMode, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBn, Init};
use crate::params::ParamStore;
use crate::tensor::{ConvSpec, Float};

pub const ANCHORS_PER_LEVEL: usize = 2;
pub const NUM_CLASSES: usize = 1;
pub const MASK_SIZE: usize = 32;
/// Initial objectness probability; keeps early focal loss well scaled.
const PRIOR_PROBABILITY: f64 = 0.01;

/// Raw outputs of one pyramid level.
#[derive(Copy, Clone, Debug)]
pub struct RawLevelPrediction {
    /// `(n, B·(1+K), h, w)`: per anchor, objectness then class logits.
    pub cls: Var,
    /// `(n, B·4, h, w)`: per anchor `(tx, ty, tw, th)`.
    pub boxes: Var,
    /// `(n, N, h, w)`: one mask seed per grid cell.
    pub mask_feat: Var,
}

pub fn cls_channel(anchor: usize, k: usize) -> usize {
    anchor * (1 + NUM_CLASSES) + k
}

pub fn box_channel(anchor: usize, k: usize) -> usize {
    anchor * 4 + k
}

#[derive(Clone, Debug)]
struct Subnet {
    hidden: ConvBn,
    out: Conv2d,
}

impl Subnet {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, out: usize, prediction: bool) -> Result<Self> {
        let spec = ConvSpec::same(channels, out, 1);
        let name_out = format!("{name}.out");
        Ok(Self {
            hidden: ConvBn::new(store, init, &format!("{name}.hidden"), ConvSpec::same(channels, channels, 3))?,
            out: if prediction {
                Conv2d::output(store, init, &name_out, spec)?
            } else {
                Conv2d::new(store, init, &name_out, spec)?
            },
        })
    }

    fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        self.out.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    cls: Subnet,
    boxes: Subnet,
    mask: Subnet,
}

impl DetectionHead {
    pub fn build(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let head = Self {
            cls: Subnet::new(
                store,
                init,
                &format!("{name}.cls"),
                channels,
                ANCHORS_PER_LEVEL * (1 + NUM_CLASSES),
                true,
            )?,
            boxes: Subnet::new(store, init, &format!("{name}.box"), channels, ANCHORS_PER_LEVEL * 4, true)?,
            mask: Subnet::new(store, init, &format!("{name}.mask"), channels, channels, false)?,
        };
        if let Some(bias) = head.cls.out.bias {
            let prior = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln() as f32;
            let data = store.tensor_mut(bias).data_mut();
            for a in 0..ANCHORS_PER_LEVEL {
                data[cls_channel(a, 0)] = prior;
            }
        }
        Ok(head)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, encoded: Var) -> Result<RawLevelPrediction> {
        Ok(RawLevelPrediction {
            cls: self.cls.forward(g, encoded)?,
            boxes: self.boxes.forward(g, encoded)?,
            mask_feat: self.mask.forward(g, encoded)?,
        })
    }

    pub fn convs(&self) -> Vec<&Conv2d> {
        [&self.cls, &self.boxes, &self.mask]
            .into_iter()
            .flat_map(|s| [&s.hidden.conv, &s.out])
            .collect()
    }

    /// The class and box output convs (mask features are not predictions).
    pub fn prediction_layers(&self) -> [&Conv2d; 2] {
        [&self.cls.out, &self.boxes.out]
    }
}

/// Reconstructs a `32×32×2` mask from one `1×1×N` cell feature through
/// five (nearest ×2 upsample → 3×3 conv → leaky) stages and a 1×1 conv.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub in_channels: usize,
    pub stages: Vec<Conv2d>,
    pub out: Conv2d,
}

impl MaskDecoder {
    pub fn build(store: &mut ParamStore, init: &mut Init, name: &str, in_channels: usize, schedule: &[usize]) -> Result<Self> {
        if 1usize << schedule.len() != MASK_SIZE {
            return Err(Error::config(format!("mask decoder needs {} stages", MASK_SIZE.trailing_zeros())));
        }
        let mut stages = Vec::with_capacity(schedule.len());
        let mut cin = in_channels;
        for (i, &cout) in schedule.iter().enumerate() {
            stages.push(Conv2d::new(
                store,
                init,
                &format!("{name}.stage{}", i + 1),
                ConvSpec::same(cin, cout, 3),
            )?);
            cin = cout;
        }
        let out = Conv2d::output(store, init, &format!("{name}.out"), ConvSpec::same(cin, 2, 1))?;
        Ok(Self { in_channels, stages, out })
    }

    /// `cells` is `(k, N, 1, 1)`; returns logits `(k, 2, 32, 32)` over
    /// (background, fruit).
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, cells: Var) -> Result<Var> {
        let s = g.shape(cells);
        if s.c != self.in_channels || s.h != 1 || s.w != 1 {
            return Err(Error::config(format!(
                "mask decoder expects (k, {}, 1, 1) cell features, got {s}",
                self.in_channels
            )));
        }
        let mut x = cells;
        for stage in &self.stages {
            x = g.upsample_nearest(x, 2)?;
            x = stage.forward_leaky(g, x)?;
        }
        self.out.forward(g, x)
    }

    /// Per-pixel (background, fruit) probabilities.
    pub fn forward_probs<T: Float>(&self, g: &mut Graph<T>, cells: Var) -> Result<Var> {
        let logits = self.forward(g, cells)?;
        g.activation(logits, Activation::SoftmaxChannels)
    }
}

/// Fuses P3/P4/P5 at stride 8 by concatenation, applies three 3×3 convs
/// (3N→N→N→2) and upsamples ×8 to input resolution.
#[derive(Clone, Debug)]
pub struct SemanticHead {
    pub hidden: Vec<ConvBn>,
    pub out: Conv2d,
}

pub const SEMANTIC_UPSAMPLE: usize = 8;

impl SemanticHead {
    pub fn build(store: &mut ParamStore, init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Self {
            hidden: vec![
                ConvBn::new(store, init, "semantic.conv1", ConvSpec::same(3 * channels, channels, 3))?,
                ConvBn::new(store, init, "semantic.conv2", ConvSpec::same(channels, channels, 3))?,
            ],
            out: Conv2d::output(store, init, "semantic.conv3", ConvSpec::same(channels, 2, 3))?,
        })
    }

    /// Logits `(n, 2, H, W)` over (background, branch).
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p3: Var, p4: Var, p5: Var) -> Result<Var> {
        let up4 = g.upsample_nearest(p4, 2)?;
        let up5 = g.upsample_nearest(p5, 4)?;
        let mut x = g.merge(&[p3, up4, up5], MergeMode::ConcatChannels)?;
        for conv in &self.hidden {
            x = conv.forward(g, x)?;
        }
        let x = self.out.forward(g, x)?;
        g.upsample_nearest(x, SEMANTIC_UPSAMPLE)
    }
}
