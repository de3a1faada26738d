//! Parameterized layers: thin wrappers holding parameter ids in a
//! [`ParamStore`] and emitting graph ops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Activation, BnParams, Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{ConvSpec, Float, Shape, Tensor};

pub const OUTPUT_INIT_STD: f64 = 0.01;

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-normal: N(0, 2 / fan_in).
    pub fn he_normal(&mut self, shape: Shape, fan_in: usize) -> Tensor {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    pub fn normal(&mut self, shape: Shape, std: f64) -> Tensor {
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..shape.numel()).map(|_| normal.sample(&mut self.rng) as f32).collect();
        Tensor::from_vec(shape, data).expect("shape matches")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, spec: ConvSpec) -> Result<Self> {
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        Self::with_std(store, init, name, spec, (2.0 / fan_in as f64).sqrt())
    }

    /// Prediction layer: weights drawn with a small fixed std so the
    /// initial logits stay near zero regardless of feature scale.
    pub fn output(store: &mut ParamStore, init: &mut Init, name: &str, spec: ConvSpec) -> Result<Self> {
        Self::with_std(store, init, name, spec, OUTPUT_INIT_STD)
    }

    fn with_std(store: &mut ParamStore, init: &mut Init, name: &str, spec: ConvSpec, std: f64) -> Result<Self> {
        spec.validate()?;
        let weight = store.add(
            format!("{name}.weight"),
            init.normal(spec.weight_shape(), std),
            ParamKind::Trainable,
        )?;
        let bias = if spec.has_bias {
            let shape = Shape::new(1, spec.out_channels, 1, 1);
            Some(store.add(format!("{name}.bias"), Tensor::zeros(shape), ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = self.bias.map(|b| g.param(b)).transpose()?;
        g.conv2d(x, &self.spec, w, b)
    }

    /// Convolution followed by leaky ReLU.
    pub fn forward_leaky<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.forward(g, x)?;
        g.activation(y, Activation::LeakyRelu)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub params: BnParams,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let shape = Shape::new(1, channels, 1, 1);
        Ok(Self {
            params: BnParams {
                scale: store.add(format!("{name}.scale"), Tensor::full(shape, 1.0), ParamKind::Trainable)?,
                shift: store.add(format!("{name}.shift"), Tensor::zeros(shape), ParamKind::Trainable)?,
                running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(shape), ParamKind::Buffer)?,
                running_var: store.add(format!("{name}.running_var"), Tensor::full(shape, 1.0), ParamKind::Buffer)?,
            },
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.batch_norm(x, &self.params)
    }

    /// Batch norm followed by leaky ReLU.
    pub fn forward_leaky<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.forward(g, x)?;
        g.activation(y, Activation::LeakyRelu)
    }
}

/// Bias-free convolution → batch norm → leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, spec: ConvSpec) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, init, name, spec.without_bias())?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), spec.out_channels)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        self.bn.forward_leaky(g, y)
    }
}
