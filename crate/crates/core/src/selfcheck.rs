//! Finite-difference verification of every operator and of the composed
//! model's total loss.
//!
//! Checks run in f64: central differences at 32-bit precision cannot
//! resolve the 1e-3 tolerance through a network this deep, while the
//! kernels are the same generic code either way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_gradcheck, Activation, BnParams, GradCheckReport, Graph, MergeMode, Mode, Probe, Var};
use crate::config::{ModelConfig, RunConfig, SynthConfig};
use crate::data::synth_orchard;
use crate::error::Result;
use crate::fpn::{Aspp, GatedFpn};
use crate::heads::{DetectionHead, MaskDecoder, SemanticHead};
use crate::model::{images_to_tensor, DaSNet};
use crate::nn::{Init, OUTPUT_INIT_STD};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{ConvSpec, Shape, Tensor};
use crate::train::{build_targets, compute_loss};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;
pub const LINEAR_TOLERANCE: f64 = 1e-6;
/// Input side used for the composed-model check.
pub const MODEL_CHECK_SIZE: usize = 96;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < self.tolerance
    }
}

struct Fixture {
    rng: ChaCha8Rng,
    store: ParamStore<f64>,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::new(),
        }
    }

    fn values(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(-1.0..1.0)).collect()
    }

    fn tensor(&mut self, s: Shape) -> Tensor<f64> {
        let v = self.values(s.numel());
        Tensor::from_vec(s, v).expect("shape matches")
    }

    fn param(&mut self, name: &str, s: Shape) -> crate::params::ParamId {
        let t = self.tensor(s);
        self.store.add(name, t, ParamKind::Trainable).expect("unique name")
    }

    /// Per-element random targets for a smooth-L1 readout, so every output
    /// element receives a distinct gradient.
    fn readout(&mut self, n: usize) -> Vec<(usize, f64)> {
        (0..n).map(|i| (i, self.rng.random_range(-1.0..1.0))).collect()
    }

    fn check(mut self, name: &str, tolerance: f64, f: impl FnMut(&mut Graph<f64>) -> Result<Var>) -> Result<CheckResult> {
        let report = finite_diff_gradcheck(&mut self.store, Mode::Train, Probe::All, EPSILON, f)?;
        Ok(CheckResult {
            name: name.into(),
            tolerance,
            report,
        })
    }
}

fn f64_modules<M>(seed: u64, build: impl FnOnce(&mut ParamStore, &mut Init) -> Result<M>) -> Result<(M, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let m = build(&mut store, &mut Init::new(seed))?;
    let mut cast: ParamStore<f64> = store.cast();
    // Perturb zero-initialized biases so their gradients are generic.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    for id in cast.trainable_ids() {
        for v in cast.tensor_mut(id).data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    Ok((m, cast))
}

/// One check per operator and per network module.
pub fn operator_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    // Linear: bias-free convolution read out by a plain sum.
    {
        let mut fx = Fixture::new(seed);
        let spec = ConvSpec::same(3, 4, 3).without_bias();
        let w = fx.param("w", spec.weight_shape());
        let x = fx.tensor(Shape::new(2, 3, 6, 6));
        out.push(fx.check("conv2d (linear)", LINEAR_TOLERANCE, |g| {
            let xi = g.input(x.clone())?;
            let wv = g.param(w)?;
            let y = g.conv2d(xi, &spec, wv, None)?;
            g.sum(y)
        })?);
    }

    for (name, spec) in [
        ("conv2d + leaky_relu", ConvSpec::same(3, 4, 3)),
        ("conv2d stride 2", ConvSpec::same(3, 4, 3).with_stride(2)),
        ("conv2d dilation 2", ConvSpec::same(3, 4, 3).with_dilation(2)),
    ] {
        let mut fx = Fixture::new(seed + 1);
        let w = fx.param("w", spec.weight_shape());
        let b = fx.param("b", Shape::new(1, 4, 1, 1));
        let x = fx.tensor(Shape::new(2, 3, 8, 8));
        out.push(fx.check(name, TOLERANCE, |g| {
            let xi = g.input(x.clone())?;
            let (wv, bv) = (g.param(w)?, g.param(b)?);
            let y = g.conv2d(xi, &spec, wv, Some(bv))?;
            let y = g.activation(y, Activation::LeakyRelu)?;
            g.sum(y)
        })?);
    }

    {
        let mut fx = Fixture::new(seed + 2);
        let x = fx.tensor(Shape::new(3, 4, 5, 5));
        let bn = BnParams {
            scale: fx.param("scale", Shape::new(1, 4, 1, 1)),
            shift: fx.param("shift", Shape::new(1, 4, 1, 1)),
            running_mean: fx.store.add("rm", Tensor::zeros(Shape::new(1, 4, 1, 1)), ParamKind::Buffer)?,
            running_var: fx.store.add("rv", Tensor::full(Shape::new(1, 4, 1, 1), 1.0), ParamKind::Buffer)?,
        };
        let w = fx.param("w", Shape::new(4, 4, 1, 1));
        let targets = fx.readout(3 * 4 * 25);
        out.push(fx.check("batch_norm", TOLERANCE, |g| {
            let xi = g.input(x.clone())?;
            let wv = g.param(w)?;
            let h = g.conv2d(xi, &ConvSpec::same(4, 4, 1).without_bias(), wv, None)?;
            let y = g.batch_norm(h, &bn)?;
            g.smooth_l1(y, targets.clone(), 1.0)
        })?);
    }

    for kind in [Activation::Tanh, Activation::Sigmoid, Activation::SoftmaxChannels] {
        let mut fx = Fixture::new(seed + 3);
        let w = fx.param("w", Shape::new(3, 2, 1, 1));
        let x = fx.tensor(Shape::new(2, 2, 4, 4));
        let targets = fx.readout(2 * 3 * 16);
        out.push(fx.check(&format!("activation {kind:?}"), TOLERANCE, |g| {
            let xi = g.input(x.clone())?;
            let wv = g.param(w)?;
            let h = g.conv2d(xi, &ConvSpec::same(2, 3, 1).without_bias(), wv, None)?;
            let y = g.activation(h, kind)?;
            g.smooth_l1(y, targets.clone(), 1.0)
        })?);
    }

    {
        let mut fx = Fixture::new(seed + 4);
        let gate = fx.param("gate", Shape::new(1, 3, 1, 1));
        let x = fx.tensor(Shape::new(2, 3, 4, 4));
        let targets = fx.readout(2 * 3 * 16);
        out.push(fx.check("channel_gate", TOLERANCE, |g| {
            let xi = g.input(x.clone())?;
            let gv = g.param(gate)?;
            let y = g.channel_gate(xi, gv)?;
            g.smooth_l1(y, targets.clone(), 1.0)
        })?);
    }

    {
        let mut fx = Fixture::new(seed + 5);
        let a = fx.param("a", Shape::new(1, 2, 2, 2));
        let b = fx.param("b", Shape::new(1, 2, 4, 4));
        let c = fx.param("c", Shape::new(1, 3, 4, 4));
        let targets = fx.readout(5 * 16);
        out.push(fx.check("upsample + merge", TOLERANCE, |g| {
            let (av, bv, cv) = (g.param(a)?, g.param(b)?, g.param(c)?);
            let up = g.upsample_nearest(av, 2)?;
            let added = g.merge(&[up, bv], MergeMode::Add)?;
            let y = g.merge(&[added, cv], MergeMode::ConcatChannels)?;
            g.smooth_l1(y, targets.clone(), 1.0)
        })?);
    }

    {
        let mut fx = Fixture::new(seed + 6);
        let x = fx.param("x", Shape::new(2, 5, 3, 3));
        out.push(fx.check("gather_cells", TOLERANCE, |g| {
            let xv = g.param(x)?;
            let cells = g.gather_cells(xv, &[(0, 1, 2), (1, 0, 0), (0, 1, 2)])?;
            let y = g.activation(cells, Activation::Tanh)?;
            g.sum(y)
        })?);
    }

    {
        let mut fx = Fixture::new(seed + 7);
        let x = fx.param("x", Shape::new(2, 4, 3, 3));
        let targets: Vec<i8> = (0..72).map(|i| [1, 0, -1, 0][i % 4]).collect();
        out.push(fx.check("focal_loss", TOLERANCE, |g| {
            let xv = g.param(x)?;
            g.focal_loss(xv, targets.clone(), 0.25, 2.0, 3.0)
        })?);
    }

    {
        let mut fx = Fixture::new(seed + 8);
        let x = fx.param("x", Shape::new(1, 8, 2, 2));
        let mut targets = fx.readout(32);
        for (i, t) in targets.iter_mut().enumerate() {
            t.1 *= if i % 2 == 0 { 0.3 } else { 3.0 };
        }
        out.push(fx.check("smooth_l1", TOLERANCE, |g| {
            let xv = g.param(x)?;
            g.smooth_l1(xv, targets.clone(), 4.0)
        })?);
    }

    {
        let mut fx = Fixture::new(seed + 9);
        let x = fx.param("x", Shape::new(2, 2, 3, 3));
        let labels: Vec<i16> = (0..18).map(|i| [0, 1, -1][i % 3]).collect();
        out.push(fx.check("softmax_cross_entropy", TOLERANCE, |g| {
            let xv = g.param(x)?;
            g.softmax_cross_entropy(xv, labels.clone(), 12.0)
        })?);
    }

    {
        let (fpn, mut store) = f64_modules(seed, |s, i| {
            let fpn = GatedFpn::build(s, i, [3, 4, 5], 4)?;
            let aspp = Aspp::build(s, i, "aspp", 4, &[1, 2, 4], 2)?;
            Ok((fpn, aspp))
        })?;
        let mut fx = Fixture::new(seed + 10);
        let (c3, c4, c5) = (
            fx.tensor(Shape::new(1, 3, 8, 8)),
            fx.tensor(Shape::new(1, 4, 4, 4)),
            fx.tensor(Shape::new(1, 5, 2, 2)),
        );
        let targets = fx.readout(4 * 64);
        let report = finite_diff_gradcheck(&mut store, Mode::Train, Probe::All, EPSILON, |g| {
            let pyr = crate::backbone::FeaturePyramid {
                c3: g.input(c3.clone())?,
                c4: g.input(c4.clone())?,
                c5: g.input(c5.clone())?,
            };
            let [p3, _, _] = fpn.0.forward(g, &pyr)?;
            let y = fpn.1.forward(g, p3)?;
            g.smooth_l1(y, targets.clone(), 1.0)
        })?;
        out.push(CheckResult {
            name: "gated fpn + aspp".into(),
            tolerance: TOLERANCE,
            report,
        });
    }

    {
        let (mods, mut store) = f64_modules(seed, |s, i| {
            Ok((
                DetectionHead::build(s, i, "head", 4)?,
                MaskDecoder::build(s, i, "dec", 4, &[3, 3, 2, 2, 2])?,
                SemanticHead::build(s, i, 4)?,
            ))
        })?;
        let mut fx = Fixture::new(seed + 11);
        let (p3, p4, p5) = (
            fx.tensor(Shape::new(1, 4, 4, 4)),
            fx.tensor(Shape::new(1, 4, 2, 2)),
            fx.tensor(Shape::new(1, 4, 1, 1)),
        );
        let cls_t: Vec<i8> = (0..64).map(|i| i8::from(i % 7 == 0)).collect();
        let box_t = fx.readout(8 * 16);
        let mask_t: Vec<i16> = (0..2 * 1024).map(|i| i16::from((i / 16) % 3 == 0)).collect();
        let sem_t: Vec<i16> = (0..32 * 32).map(|i| i16::from(i % 5 == 0)).collect();
        let report = finite_diff_gradcheck(&mut store, Mode::Train, Probe::Random { count: 150, seed }, EPSILON, |g| {
            let x = g.input(p3.clone())?;
            let raw = mods.0.forward(g, x)?;
            let focal = g.focal_loss(raw.cls, cls_t.clone(), 0.25, 2.0, 2.0)?;
            let boxes = g.smooth_l1(raw.boxes, box_t.clone(), 2.0)?;
            let cells = g.gather_cells(raw.mask_feat, &[(0, 1, 1), (0, 3, 2)])?;
            let logits = mods.1.forward(g, cells)?;
            let mask = g.softmax_cross_entropy(logits, mask_t.clone(), 2048.0)?;
            let (a, b) = (g.input(p4.clone())?, g.input(p5.clone())?);
            let sem = mods.2.forward(g, x, a, b)?;
            let sem = g.softmax_cross_entropy(sem, sem_t.clone(), 1024.0)?;
            g.weighted_sum(&[(focal, 1.0), (boxes, 1.0), (mask, 1.0), (sem, 1.0)])
        })?;
        out.push(CheckResult {
            name: "heads + mask decoder + semantic head".into(),
            tolerance: TOLERANCE,
            report,
        });
    }
    Ok(out)
}

/// Total training loss of the configured model at 96×96 on one synthetic
/// scene, spot-checked on `probes` random parameters.
pub fn model_check(model_cfg: &ModelConfig, probes: usize, seed: u64) -> Result<CheckResult> {
    let mut cfg = RunConfig {
        model: model_cfg.clone(),
        ..RunConfig::default()
    };
    cfg.model.input_size = [MODEL_CHECK_SIZE, MODEL_CHECK_SIZE];
    let synth = SynthConfig {
        width: MODEL_CHECK_SIZE as u32,
        height: MODEL_CHECK_SIZE as u32,
        fruit_count: [3, 3],
        branch_count: [1, 1],
        fruit_radius: [8.0, 20.0],
        branch_width: [4.0, 6.0],
        ..SynthConfig::default()
    };
    let img = synth_orchard(seed, &synth);
    let (model, store) = DaSNet::build(&cfg.model)?;
    let mut store: ParamStore<f64> = store.cast();
    // At the small output init the gradients reaching the heads' hidden
    // layers sit near 1e-10, below central-difference resolution. Checking
    // at He scale makes every probed entry resolvable.
    for conv in model.prediction_layers() {
        let w = store.tensor_mut(conv.weight);
        let fan_in = w.shape().numel() / w.shape().n;
        let gain = (2.0 / fan_in as f64).sqrt() / OUTPUT_INIT_STD;
        w.data_mut().iter_mut().for_each(|v| *v *= gain);
    }
    let x: Tensor<f64> = images_to_tensor(&[&img.rgb])?.cast();
    let targets = build_targets(&[&img], &model.anchors, (MODEL_CHECK_SIZE, MODEL_CHECK_SIZE), cfg.train.ignore_iou);
    let report = finite_diff_gradcheck(&mut store, Mode::Train, Probe::Random { count: probes, seed }, EPSILON, |g| {
        let xi = g.input(x.clone())?;
        let out = model.forward(g, xi)?;
        Ok(compute_loss(g, &model, &out, &targets, &cfg.train)?.total)
    })?;
    Ok(CheckResult {
        name: format!("full model {MODEL_CHECK_SIZE}x{MODEL_CHECK_SIZE} total loss"),
        tolerance: TOLERANCE,
        report,
    })
}

pub fn gradcheck_suite(model_cfg: &ModelConfig, probes: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = operator_checks(seed)?;
    all.push(model_check(model_cfg, probes, seed)?);
    Ok(all)
}
