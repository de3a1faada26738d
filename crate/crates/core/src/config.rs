//! Run configuration: one TOML document with `model`, `train`, `eval`,
//! `camera` and `synth` sections. Unknown keys are rejected and every
//! field is validated after parsing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub camera: CameraConfig,
    pub synth: SynthConfig,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionLevel {
    P3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// (height, width); both divisible by 32.
    pub input_size: [usize; 2],
    pub stem_channels: usize,
    /// Channels after each of the five downsampling stages.
    pub channel_schedule: Vec<usize>,
    /// Residual blocks following each downsampling stage; sums to 8.
    pub blocks_per_stage: Vec<usize>,
    pub fpn_channels: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_branch_channels: usize,
    /// Six (width, height) anchor priors in input pixels.
    pub anchors: Vec<[f32; 2]>,
    /// Channel counts of the five upsampling stages of the mask decoder.
    pub mask_decoder_channels: Vec<usize>,
    pub semantic_fusion_level: FusionLevel,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: [416, 416],
            stem_channels: 16,
            channel_schedule: vec![16, 32, 64, 128, 256],
            blocks_per_stage: vec![2, 2, 2, 2, 0],
            fpn_channels: 64,
            aspp_rates: vec![1, 2, 4],
            aspp_branch_channels: 64,
            anchors: vec![
                [24.0, 24.0],
                [40.0, 40.0],
                [64.0, 64.0],
                [96.0, 96.0],
                [144.0, 144.0],
                [208.0, 208.0],
            ],
            mask_decoder_channels: vec![64, 32, 16, 8, 8],
            semantic_fusion_level: FusionLevel::P3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!("input size {h}x{w} must be positive and divisible by 32")));
        }
        if self.stem_channels == 0 {
            return Err(Error::config("stem_channels must be positive"));
        }
        if self.channel_schedule.len() != 5 {
            return Err(Error::config(
                "channel_schedule needs exactly 5 entries (one per downsampling stage)",
            ));
        }
        if self.channel_schedule.contains(&0) || self.channel_schedule.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("channel_schedule must be positive and non-decreasing"));
        }
        if self.blocks_per_stage.len() != 5 || self.blocks_per_stage.iter().sum::<usize>() != 8 {
            return Err(Error::config("blocks_per_stage needs 5 entries summing to 8"));
        }
        if self.fpn_channels == 0 || self.aspp_branch_channels == 0 {
            return Err(Error::config("fpn_channels and aspp_branch_channels must be positive"));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(Error::config("aspp_rates must be non-empty and >= 1"));
        }
        if self.mask_decoder_channels.len() != 5 || self.mask_decoder_channels.contains(&0) {
            return Err(Error::config("mask_decoder_channels needs 5 positive entries"));
        }
        crate::decode::generate_anchors(&self.anchors)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub focal: f64,
    pub box_regression: f64,
    pub mask: f64,
    pub semantic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            focal: 1.0,
            box_regression: 1.0,
            mask: 1.0,
            semantic: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub hflip: bool,
    pub rot90: bool,
    pub inmask_color: bool,
    pub scale_amplifier: bool,
    /// Probability that the scale amplifier is applied to a sample.
    pub amplifier_probability: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            hflip: true,
            rot90: true,
            inmask_color: true,
            scale_amplifier: true,
            amplifier_probability: 0.3,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            hflip: false,
            rot90: false,
            inmask_color: false,
            scale_amplifier: false,
            amplifier_probability: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub loss_weights: LossWeights,
    pub augment: AugmentPolicy,
    /// Anchors with shape-IoU above this (but not best) are ignored.
    pub ignore_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            decay: 0.9,
            epochs: 30,
            batch: 4,
            seed: 0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            loss_weights: LossWeights::default(),
            augment: AugmentPolicy::default(),
            ignore_iou: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr must be finite and >= 0"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("train.decay must be in (0, 1]"));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::config("train.batch and train.epochs must be positive"));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 {
            return Err(Error::config("focal_alpha must be in [0,1] and focal_gamma >= 0"));
        }
        if !(0.0..=1.0).contains(&self.augment.amplifier_probability) {
            return Err(Error::config("augment.amplifier_probability must be in [0,1]"));
        }
        let w = &self.loss_weights;
        if [w.focal, w.box_regression, w.mask, w.semantic]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::config("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub conf_threshold: f32,
    pub nms_iou: f32,
    pub match_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.3,
            nms_iou: 0.45,
            match_iou: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::config("eval.conf_threshold must be in [0,1]"));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::config("eval.nms_iou must be in (0,1)"));
        }
        if !(self.match_iou > 0.0 && self.match_iou <= 1.0) {
            return Err(Error::config("eval.match_iou must be in (0,1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub depth_scale: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            fx: 615.0,
            fy: 615.0,
            cx: 320.0,
            cy: 240.0,
            depth_scale: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    /// Inclusive range of fruits drawn per image.
    pub fruit_count: [u32; 2],
    pub branch_count: [u32; 2],
    pub fruit_radius: [f32; 2],
    pub branch_width: [f32; 2],
    /// Instances with fewer visible pixels are culled.
    pub min_visible_area: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 416,
            height: 416,
            fruit_count: [2, 8],
            branch_count: [1, 4],
            fruit_radius: [12.0, 60.0],
            branch_width: [4.0, 12.0],
            min_visible_area: 30,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f32; 2]| r[0] > 0.0 && r[0] <= r[1];
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("synth image size must be positive"));
        }
        if self.fruit_count[0] > self.fruit_count[1] || self.branch_count[0] > self.branch_count[1] {
            return Err(Error::config("synth count ranges must be ordered"));
        }
        if !ordered(self.fruit_radius) || !ordered(self.branch_width) {
            return Err(Error::config("synth radius/width ranges must be positive and ordered"));
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if !(self.camera.fx > 0.0 && self.camera.fy > 0.0 && self.camera.depth_scale > 0.0) {
            return Err(Error::config("camera fx, fy and depth_scale must be positive"));
        }
        self.synth.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
