//! The assembled network: LW-net backbone, gated FPN, per-level ASPP and
//! detection heads, per-level mask decoders and the semantic head.

use image::RgbImage;

use crate::autodiff::{Activation, Cell, Graph, Mode, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::config::{EvalConfig, ModelConfig};
use crate::decode::{self, Anchor, Detection};
use crate::error::{Error, Result};
use crate::fpn::{Aspp, GatedFpn, LEVELS, LEVEL_NAMES};
use crate::geom::{BBox, BinaryMask};
use crate::heads::{DetectionHead, MaskDecoder, RawLevelPrediction, SemanticHead};
use crate::nn::{Conv2d, Init};
use crate::params::ParamStore;
use crate::tensor::{Float, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct DaSNet {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub fpn: GatedFpn,
    pub aspp: Vec<Aspp>,
    pub heads: Vec<DetectionHead>,
    pub decoders: Vec<MaskDecoder>,
    pub semantic: SemanticHead,
    pub anchors: Vec<Anchor>,
}

#[derive(Copy, Clone, Debug)]
pub struct ModelOutput {
    pub levels: [RawLevelPrediction; LEVELS],
    /// `(n, 2, H, W)` logits over (background, branch).
    pub semantic_logits: Var,
}

/// Inference result for one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub detections: Vec<Detection>,
    pub width: usize,
    pub height: usize,
    /// Row-major argmax of the semantic head: 1 = branch.
    pub branch_map: Vec<u8>,
    /// Detections whose box collapsed below one pixel when rendering.
    pub degenerate: usize,
}

impl Prediction {
    /// The same prediction in a `width × height` image: boxes scaled,
    /// masks and the branch map resampled nearest-neighbor.
    pub fn rescaled(&self, width: usize, height: usize) -> Prediction {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let (sx, sy) = (width as f64 / self.width as f64, height as f64 / self.height as f64);
        let detections = self
            .detections
            .iter()
            .map(|d| {
                let b = d.bbox;
                let mut out = d.clone();
                out.bbox = BBox::new(b.x * sx, b.y * sy, b.w * sx, b.h * sy);
                out.rendered_mask = d.rendered_mask.as_ref().map(|m| m.resize_nearest(width, height));
                out
            })
            .collect();
        let branch = BinaryMask {
            width: self.width,
            height: self.height,
            data: self.branch_map.iter().map(|&v| v != 0).collect(),
        }
        .resize_nearest(width, height);
        Prediction {
            detections,
            width,
            height,
            branch_map: branch.data.iter().map(|&v| u8::from(v)).collect(),
            degenerate: self.degenerate,
        }
    }
}

impl DaSNet {
    pub fn build(cfg: &ModelConfig) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.seed);
        let backbone = Backbone::build(&BackboneConfig::try_from(cfg)?, &mut store, &mut init)?;
        let n = cfg.fpn_channels;
        let fpn = GatedFpn::build(&mut store, &mut init, backbone.pyramid_channels(), n)?;
        let mut aspp = Vec::with_capacity(LEVELS);
        let mut heads = Vec::with_capacity(LEVELS);
        let mut decoders = Vec::with_capacity(LEVELS);
        for name in LEVEL_NAMES {
            aspp.push(Aspp::build(
                &mut store,
                &mut init,
                &format!("aspp.{name}"),
                n,
                &cfg.aspp_rates,
                cfg.aspp_branch_channels,
            )?);
            heads.push(DetectionHead::build(&mut store, &mut init, &format!("head.{name}"), n)?);
            decoders.push(MaskDecoder::build(
                &mut store,
                &mut init,
                &format!("mask.{name}"),
                n,
                &cfg.mask_decoder_channels,
            )?);
        }
        let semantic = SemanticHead::build(&mut store, &mut init, n)?;
        let anchors = decode::generate_anchors(&cfg.anchors)?;
        let model = Self {
            config: cfg.clone(),
            backbone,
            fpn,
            aspp,
            heads,
            decoders,
            semantic,
            anchors,
        };
        Ok((model, store))
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.config.input_size[0], self.config.input_size[1])
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, images: Var) -> Result<ModelOutput> {
        let pyr = self.backbone.forward(g, images)?;
        let ps = self.fpn.forward(g, &pyr)?;
        let mut levels = Vec::with_capacity(LEVELS);
        for (l, &p) in ps.iter().enumerate() {
            let encoded = self.aspp[l].forward(g, p)?;
            levels.push(self.heads[l].forward(g, encoded)?);
        }
        let semantic_logits = self.semantic.forward(g, ps[0], ps[1], ps[2])?;
        Ok(ModelOutput {
            levels: levels.try_into().expect("three levels"),
            semantic_logits,
        })
    }

    /// Mask logits `(k, 2, 32, 32)` for the given cells of one level.
    pub fn decode_masks<T: Float>(&self, g: &mut Graph<T>, out: &ModelOutput, level: usize, cells: &[Cell]) -> Result<Var> {
        let feats = g.gather_cells(out.levels[level].mask_feat, cells)?;
        self.decoders[level].forward(g, feats)
    }

    /// Full inference: decode, NMS, mask decoding for the survivors,
    /// rendering, and the semantic argmax.
    pub fn predict(&self, store: &ParamStore, images: Tensor, eval: &EvalConfig) -> Result<Vec<Prediction>> {
        let s = images.shape();
        let mut g = Graph::new(store, Mode::Infer);
        let x = g.input(images)?;
        let out = self.forward(&mut g, x)?;
        let size = (s.w, s.h);
        let mut per_image = Vec::with_capacity(s.n);
        for b in 0..s.n {
            let mut candidates = Vec::new();
            for (l, raw) in out.levels.iter().enumerate() {
                candidates.extend(decode::decode_boxes(
                    g.value(raw.cls),
                    g.value(raw.boxes),
                    b,
                    l,
                    &self.anchors,
                    eval.conf_threshold as f64,
                    size,
                ));
            }
            per_image.push(decode::nms(candidates, eval.nms_iou as f64));
        }
        for l in 0..LEVELS {
            let mut cells: Vec<Cell> = Vec::new();
            let mut owners = Vec::new();
            for (b, dets) in per_image.iter().enumerate() {
                for (d, det) in dets.iter().enumerate() {
                    let c = det.cell.expect("decoded detections carry a cell");
                    if c.level == l {
                        cells.push((c.batch, c.row, c.col));
                        owners.push((b, d));
                    }
                }
            }
            if cells.is_empty() {
                continue;
            }
            let logits = self.decode_masks(&mut g, &out, l, &cells)?;
            let probs = g.activation(logits, Activation::SoftmaxChannels)?;
            let pv = g.value(probs);
            for (k, &(b, d)) in owners.iter().enumerate() {
                per_image[b][d].mask32 = Some(pv.plane(k, 1).to_vec());
            }
        }
        let sem = g.value(out.semantic_logits);
        let mut preds = Vec::with_capacity(s.n);
        for (b, mut dets) in per_image.into_iter().enumerate() {
            let mut degenerate = 0;
            for det in &mut dets {
                let (mask, ok) = decode::render_instance_mask(det, size);
                degenerate += usize::from(!ok);
                det.rendered_mask = Some(mask);
            }
            let (bg, fg) = (sem.plane(b, 0), sem.plane(b, 1));
            let branch_map = bg.iter().zip(fg).map(|(a, c)| u8::from(c > a)).collect();
            preds.push(Prediction {
                detections: dets,
                width: s.w,
                height: s.h,
                branch_map,
                degenerate,
            });
        }
        Ok(preds)
    }
}

impl DaSNet {
    /// Every conv initialized with the small output std.
    pub fn prediction_layers(&self) -> Vec<&Conv2d> {
        let heads = self.heads.iter().flat_map(|h| h.prediction_layers());
        heads
            .chain(self.decoders.iter().map(|d| &d.out))
            .chain([&self.semantic.out])
            .collect()
    }

    /// Predict on images of any size: each is resized (bilinear) to the
    /// network input and the result mapped back to the original size.
    pub fn predict_images(&self, store: &ParamStore, images: &[&RgbImage], eval: &EvalConfig, batch: usize) -> Result<Vec<Prediction>> {
        let (h, w) = self.input_size();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let resized: Vec<RgbImage> = chunk
                .iter()
                .map(|img| {
                    if (img.width() as usize, img.height() as usize) == (w, h) {
                        (*img).clone()
                    } else {
                        image::imageops::resize(*img, w as u32, h as u32, image::imageops::FilterType::Triangle)
                    }
                })
                .collect();
            let x = images_to_tensor(&resized.iter().collect::<Vec<_>>())?;
            for (pred, img) in self.predict(store, x, eval)?.into_iter().zip(chunk) {
                out.push(pred.rescaled(img.width() as usize, img.height() as usize));
            }
        }
        Ok(out)
    }
}

/// Stack RGB images into an `(n, 3, H, W)` tensor scaled to `[0, 1]`.
pub fn images_to_tensor(images: &[&RgbImage]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::config("no images to batch"));
    };
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width() as usize, img.height() as usize) != (w, h) {
            return Err(Error::config("images in a batch must share one size"));
        }
        for c in 0..3 {
            data.extend(img.pixels().map(|p| p[c] as f32 / 255.0));
        }
    }
    Tensor::from_vec(Shape::new(images.len(), 3, h, w), data)
}
