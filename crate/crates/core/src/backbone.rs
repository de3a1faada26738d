//! LW-net: a stem convolution, five stride-2 downsampling blocks and eight
//! pre-activation residual blocks, emitting the stride 8/16/32 pyramid.

use crate::autodiff::{Graph, MergeMode, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Init};
use crate::params::ParamStore;
use crate::tensor::{ConvSpec, Float};

pub const DOWNSAMPLING_STAGES: usize = 5;
pub const RESIDUAL_BLOCKS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub channel_schedule: [usize; DOWNSAMPLING_STAGES],
    pub blocks_per_stage: [usize; DOWNSAMPLING_STAGES],
    pub input_size: (usize, usize),
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.channel_schedule.contains(&0) {
            return Err(Error::config("backbone channel counts must be positive"));
        }
        if self.channel_schedule.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("channel_schedule must be non-decreasing"));
        }
        let blocks: usize = self.blocks_per_stage.iter().sum();
        if blocks != RESIDUAL_BLOCKS {
            return Err(Error::config(format!(
                "blocks_per_stage sums to {blocks}, expected {RESIDUAL_BLOCKS}"
            )));
        }
        let (h, w) = self.input_size;
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("input size {h}x{w} is not divisible by 32")));
        }
        Ok(())
    }
}

impl TryFrom<&ModelConfig> for BackboneConfig {
    type Error = Error;

    fn try_from(m: &ModelConfig) -> Result<Self> {
        let schedule: [usize; 5] = m
            .channel_schedule
            .as_slice()
            .try_into()
            .map_err(|_| Error::config("channel_schedule needs 5 entries"))?;
        let blocks: [usize; 5] = m
            .blocks_per_stage
            .as_slice()
            .try_into()
            .map_err(|_| Error::config("blocks_per_stage needs 5 entries"))?;
        Ok(Self {
            stem_channels: m.stem_channels,
            channel_schedule: schedule,
            blocks_per_stage: blocks,
            input_size: (m.input_size[0], m.input_size[1]),
        })
    }
}

/// Backbone outputs at strides 8, 16 and 32.
#[derive(Copy, Clone, Debug)]
pub struct FeaturePyramid {
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
}

/// BN → leaky → 3×3 conv → BN → leaky → 3×3 conv, added to the input.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub bn1: BatchNorm2d,
    pub conv1: Conv2d,
    pub bn2: BatchNorm2d,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), channels)?,
            conv1: Conv2d::new(store, init, &format!("{name}.conv1"), ConvSpec::same(channels, channels, 3))?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), channels)?,
            conv2: Conv2d::new(store, init, &format!("{name}.conv2"), ConvSpec::same(channels, channels, 3))?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.bn1.forward_leaky(g, x)?;
        let h = self.conv1.forward(g, h)?;
        let h = self.bn2.forward_leaky(g, h)?;
        let h = self.conv2.forward(g, h)?;
        g.merge(&[x, h], MergeMode::Add)
    }
}

/// Stride-2 3×3 conv on the pre-activated input plus a stride-2 1×1 skip.
#[derive(Clone, Debug)]
pub struct DownBlock {
    pub bn: BatchNorm2d,
    pub conv: Conv2d,
    pub skip: Conv2d,
}

impl DownBlock {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cin)?,
            conv: Conv2d::new(store, init, &format!("{name}.conv"), ConvSpec::same(cin, cout, 3).with_stride(2))?,
            skip: Conv2d::new(
                store,
                init,
                &format!("{name}.skip"),
                ConvSpec::same(cin, cout, 1).with_stride(2).without_bias(),
            )?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.bn.forward_leaky(g, x)?;
        let h = self.conv.forward(g, h)?;
        let s = self.skip.forward(g, x)?;
        g.merge(&[h, s], MergeMode::Add)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub down: DownBlock,
    pub blocks: Vec<ResidualBlock>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Conv2d,
    pub stages: Vec<Stage>,
    /// BN → leaky applied to the C3, C4 and C5 taps; the residual stream
    /// itself continues un-normalized.
    pub taps: Vec<BatchNorm2d>,
}

impl Backbone {
    pub fn build(cfg: &BackboneConfig, store: &mut ParamStore, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let stem = Conv2d::new(store, init, "backbone.stem", ConvSpec::same(3, cfg.stem_channels, 3))?;
        let mut cin = cfg.stem_channels;
        let mut stages = Vec::with_capacity(DOWNSAMPLING_STAGES);
        for (s, (&cout, &nblocks)) in cfg.channel_schedule.iter().zip(&cfg.blocks_per_stage).enumerate() {
            let down = DownBlock::new(store, init, &format!("backbone.stage{}.down", s + 1), cin, cout)?;
            let blocks = (0..nblocks)
                .map(|b| ResidualBlock::new(store, init, &format!("backbone.stage{}.block{}", s + 1, b + 1), cout))
                .collect::<Result<_>>()?;
            stages.push(Stage { down, blocks });
            cin = cout;
        }
        let taps = (3..=5)
            .map(|l| BatchNorm2d::new(store, &format!("backbone.c{l}.bn"), cfg.channel_schedule[l - 1]))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: cfg.clone(),
            stem,
            stages,
            taps,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, image: Var) -> Result<FeaturePyramid> {
        let s = g.shape(image);
        if s.c != 3 {
            return Err(Error::config(format!("backbone expects 3-channel images, got {s}")));
        }
        if !s.h.is_multiple_of(32) || !s.w.is_multiple_of(32) || s.h == 0 || s.w == 0 {
            return Err(Error::config(format!("image {}x{} is not divisible by 32", s.h, s.w)));
        }
        let mut x = self.stem.forward(g, image)?;
        let mut outputs = Vec::with_capacity(DOWNSAMPLING_STAGES);
        for stage in &self.stages {
            x = stage.down.forward(g, x)?;
            for block in &stage.blocks {
                x = block.forward(g, x)?;
            }
            outputs.push(x);
        }
        Ok(FeaturePyramid {
            c3: self.taps[0].forward_leaky(g, outputs[2])?,
            c4: self.taps[1].forward_leaky(g, outputs[3])?,
            c5: self.taps[2].forward_leaky(g, outputs[4])?,
        })
    }

    /// Channel counts of (C3, C4, C5).
    pub fn pyramid_channels(&self) -> [usize; 3] {
        let s = &self.config.channel_schedule;
        [s[2], s[3], s[4]]
    }
}
