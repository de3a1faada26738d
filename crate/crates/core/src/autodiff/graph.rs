//! Tape-style computation graph. Nodes are appended in evaluation order,
//! so reverse index order is a valid reverse topological order.

use crate::autodiff::kernels::{self, sigmoid, BN_EPS, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{ConvSpec, Float, Shape, Tensor};

/// Probability clamp applied before taking logarithms in the losses.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    LeakyRelu,
    Sigmoid,
    SoftmaxChannels,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MergeMode {
    Add,
    ConcatChannels,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Parameter handles of one batch-norm layer.
#[derive(Copy, Clone, Debug)]
pub struct BnParams {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Batch statistics observed by a training-mode batch norm, to be folded
/// into the running buffers once the step completes.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Position of one grid cell: (batch index, row, column).
pub type Cell = (usize, usize, usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Gate {
        x: Var,
        g: Var,
    },
    Add(Vec<Var>),
    Concat(Vec<Var>),
    Gather {
        x: Var,
        cells: Vec<Cell>,
    },
    Sum {
        x: Var,
    },
    Focal {
        x: Var,
        targets: Vec<i8>,
        alpha: f64,
        gamma: f64,
        norm: f64,
    },
    SmoothL1 {
        x: Var,
        entries: Vec<(usize, f64)>,
        norm: f64,
    },
    SoftmaxCe {
        x: Var,
        labels: Vec<i16>,
        norm: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "input",
            Op::Param(_) => "param",
            Op::Conv { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Act { .. } => "activation",
            Op::Upsample { .. } => "upsample_nearest",
            Op::Gate { .. } => "channel_gate",
            Op::Add(_) => "merge_add",
            Op::Concat(_) => "merge_concat",
            Op::Gather { .. } => "gather_cells",
            Op::Sum { .. } => "sum",
            Op::Focal { .. } => "focal_loss",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::WeightedSum(_) => "weighted_sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, scale, shift, .. } => vec![*x, *scale, *shift],
            Op::Gate { x, g } => vec![*x, *g],
            Op::Add(v) | Op::Concat(v) => v.clone(),
            Op::WeightedSum(items) => items.iter().map(|(v, _)| *v).collect(),
            Op::Act { x, .. }
            | Op::Upsample { x, .. }
            | Op::Gather { x, .. }
            | Op::Sum { x }
            | Op::Focal { x, .. }
            | Op::SmoothL1 { x, .. }
            | Op::SoftmaxCe { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s, T: Float = f32> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
    /// Running hash of which side of zero every leaky-ReLU input fell on.
    kinks: Option<u64>,
}

/// Focal loss on a probability of the true class:
/// `−α·(1−p_t)^γ·log(p_t)` with `p_t` clamped to `[1e-7, 1−1e-7]`.
pub fn focal_loss(p_t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p_t.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -alpha * (1.0 - p).powf(gamma) * p.ln()
}

/// Loss and its derivative with respect to the logit for one anchor.
fn focal_on_logit(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let (p_t, alpha_t, sign) = if positive { (p, alpha, 1.0) } else { (1.0 - p, 1.0 - alpha, -1.0) };
    let loss = focal_loss(p_t, alpha_t, gamma);
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p_t) {
        return (loss, 0.0);
    }
    let q = 1.0 - p_t;
    let mut d_pt = -alpha_t * q.powf(gamma) / p_t;
    if gamma != 0.0 {
        d_pt += alpha_t * gamma * q.powf(gamma - 1.0) * p_t.ln();
    }
    (loss, d_pt * sign * p * (1.0 - p))
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

impl<'s, T: Float> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            mode,
            bn_updates: Vec::new(),
            kinks: None,
        }
    }

    /// Record the sign pattern at every kink so two evaluations can be
    /// compared for a crossing.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(0xcbf2_9ce4_8422_2325);
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(id) => self.store.entry(*id).kind == ParamKind::Trainable,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input. No gradient is tracked for it.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let src = self.store.tensor(id);
        let t = Tensor::from_vec(src.shape(), src.data().to_vec())?;
        self.push(t, Op::Param(id))
    }

    pub fn conv2d(&mut self, x: Var, spec: &ConvSpec, w: Var, b: Option<Var>) -> Result<Var> {
        spec.validate()?;
        let xs = self.shape(x);
        if xs.c != spec.in_channels {
            return Err(Error::config(format!(
                "conv2d expects {} input channels, got input {xs}",
                spec.in_channels
            )));
        }
        if self.shape(w) != spec.weight_shape() {
            return Err(Error::config(format!(
                "conv2d weight shape {} != {}",
                self.shape(w),
                spec.weight_shape()
            )));
        }
        if spec.has_bias != b.is_some() {
            return Err(Error::config("conv2d bias presence does not match its spec"));
        }
        if let Some(b) = b {
            if self.shape(b).numel() != spec.out_channels {
                return Err(Error::config("conv2d bias length != out_channels"));
            }
        }
        let (oh, ow) = spec
            .output_hw(xs.h, xs.w)
            .ok_or_else(|| Error::config(format!("conv2d kernel larger than padded input {xs}")))?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            xs,
            spec,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            oh,
            ow,
        );
        let t = Tensor::from_vec(Shape::new(xs.n, spec.out_channels, oh, ow), out)?;
        self.push(t, Op::Conv { x, w, b, spec: *spec })
    }

    pub fn batch_norm(&mut self, x: Var, p: &BnParams) -> Result<Var> {
        let s = self.shape(x);
        if s.numel() == 0 {
            return Err(Error::config("batch_norm on an empty batch"));
        }
        let scale = self.param(p.scale)?;
        let shift = self.param(p.shift)?;
        if self.shape(scale).numel() != s.c || self.shape(shift).numel() != s.c {
            return Err(Error::config(format!("batch_norm scale/shift length != channels of {s}")));
        }
        let (mean, var, batch_stats) = match self.mode {
            Mode::Train => {
                let (mean, var) = kernels::channel_stats(self.value(x).data(), s);
                let count = (s.n * s.plane()) as f64;
                let unbiased = if count > 1.0 {
                    var.iter().map(|v| v * count / (count - 1.0)).collect()
                } else {
                    var.clone()
                };
                self.bn_updates.push(BnUpdate {
                    running_mean: p.running_mean,
                    running_var: p.running_var,
                    mean: mean.clone(),
                    var: unbiased,
                });
                (mean, var, true)
            }
            Mode::Infer => {
                let mean = self.store.tensor(p.running_mean).data().iter().map(|v| v.as_f64()).collect();
                let var = self.store.tensor(p.running_var).data().iter().map(|v| v.as_f64()).collect();
                (mean, var, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v: &f64| 1.0 / (v + BN_EPS).sqrt()).collect();
        let out = kernels::batch_norm_apply(
            self.value(x).data(),
            s,
            &mean,
            &inv_std,
            self.value(scale).data(),
            self.value(shift).data(),
        );
        self.push(
            Tensor::from_vec(s, out)?,
            Op::BatchNorm {
                x,
                scale,
                shift,
                mean,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let s = self.shape(x);
        let data = self.nodes[x.0].value.data();
        if let (Activation::LeakyRelu, Some(h)) = (kind, self.kinks.as_mut()) {
            for chunk in data.chunks(64) {
                let word = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |w, (i, &v)| w | (u64::from(v > T::zero()) << i));
                *h = (*h ^ word).wrapping_mul(0x0100_0000_01b3);
            }
        }
        let out: Vec<T> = match kind {
            Activation::Tanh => data.iter().map(|v| v.tanh()).collect(),
            Activation::Sigmoid => data.iter().map(|v| T::from_f64_lossy(sigmoid(v.as_f64()))).collect(),
            Activation::LeakyRelu => data.iter().map(|&v| kernels::leaky_relu(v)).collect(),
            Activation::SoftmaxChannels => {
                if s.c < 2 {
                    return Err(Error::config("softmax over channels needs at least 2 channels"));
                }
                kernels::softmax_channels(data, s)
            }
        };
        self.push(Tensor::from_vec(s, out)?, Op::Act { x, kind })
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::config("upsample factor must be >= 1"));
        }
        let s = self.shape(x);
        let out = kernels::upsample_nearest(self.value(x).data(), s, factor);
        let t = Tensor::from_vec(Shape::new(s.n, s.c, s.h * factor, s.w * factor), out)?;
        self.push(t, Op::Upsample { x, factor })
    }

    /// `y[n,c,h,w] = x[n,c,h,w] · tanh(g[c])`.
    pub fn channel_gate(&mut self, x: Var, g: Var) -> Result<Var> {
        let s = self.shape(x);
        if self.shape(g).numel() != s.c {
            return Err(Error::config(format!(
                "channel_gate has {} gate values for {} channels",
                self.shape(g).numel(),
                s.c
            )));
        }
        let gates: Vec<T> = self.value(g).data().iter().map(|v| v.tanh()).collect();
        let plane = s.plane();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let gc = gates[i % s.c];
            chunk.iter_mut().for_each(|v| *v *= gc);
        }
        self.push(Tensor::from_vec(s, out)?, Op::Gate { x, g })
    }

    pub fn merge(&mut self, inputs: &[Var], mode: MergeMode) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::config("merge of zero tensors"))?;
        let s0 = self.shape(first);
        match mode {
            MergeMode::Add => {
                let mut out = self.value(first).data().to_vec();
                for &v in &inputs[1..] {
                    if self.shape(v) != s0 {
                        return Err(Error::config(format!("add of shapes {s0} and {}", self.shape(v))));
                    }
                    for (o, &a) in out.iter_mut().zip(self.value(v).data()) {
                        *o += a;
                    }
                }
                self.push(Tensor::from_vec(s0, out)?, Op::Add(inputs.to_vec()))
            }
            MergeMode::ConcatChannels => {
                let mut channels = 0;
                for &v in inputs {
                    let s = self.shape(v);
                    if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                        return Err(Error::config(format!("concat of shapes {s0} and {s}")));
                    }
                    channels += s.c;
                }
                let out_shape = Shape::new(s0.n, channels, s0.h, s0.w);
                let mut out = Vec::with_capacity(out_shape.numel());
                for n in 0..s0.n {
                    for &v in inputs {
                        let s = self.shape(v);
                        let img = s.c * s.plane();
                        out.extend_from_slice(&self.value(v).data()[n * img..(n + 1) * img]);
                    }
                }
                self.push(Tensor::from_vec(out_shape, out)?, Op::Concat(inputs.to_vec()))
            }
        }
    }

    /// Stack the feature vectors at `cells` into a `(k, c, 1, 1)` tensor.
    pub fn gather_cells(&mut self, x: Var, cells: &[Cell]) -> Result<Var> {
        let s = self.shape(x);
        let mut out = Vec::with_capacity(cells.len() * s.c);
        for &(n, i, j) in cells {
            if n >= s.n || i >= s.h || j >= s.w {
                return Err(Error::config(format!("cell ({n}, {i}, {j}) outside {s}")));
            }
            out.extend((0..s.c).map(|c| self.value(x).at(n, c, i, j)));
        }
        let t = Tensor::from_vec(Shape::new(cells.len(), s.c, 1, 1), out)?;
        self.push(t, Op::Gather { x, cells: cells.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::from_f64_lossy(total)), Op::Sum { x })
    }

    /// Sigmoid focal loss over logits. `targets` holds 1 (positive),
    /// 0 (negative) or −1 (ignored) per element of `x`; the sum is divided
    /// by `norm`.
    pub fn focal_loss(&mut self, x: Var, targets: Vec<i8>, alpha: f64, gamma: f64, norm: f64) -> Result<Var> {
        if targets.len() != self.shape(x).numel() {
            return Err(Error::config("focal_loss target count != logit count"));
        }
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(&targets)
            .filter(|(_, &t)| t >= 0)
            .map(|(v, &t)| focal_on_logit(v.as_f64(), t == 1, alpha, gamma).0)
            .sum();
        self.push(
            Tensor::scalar(T::from_f64_lossy(total / norm)),
            Op::Focal {
                x,
                targets,
                alpha,
                gamma,
                norm,
            },
        )
    }

    /// Smooth-L1 between selected elements of `x` (by flat index) and
    /// their targets, summed and divided by `norm`.
    pub fn smooth_l1(&mut self, x: Var, entries: Vec<(usize, f64)>, norm: f64) -> Result<Var> {
        let data = self.value(x).data();
        if entries.iter().any(|(i, _)| *i >= data.len()) {
            return Err(Error::config("smooth_l1 index out of range"));
        }
        let total: f64 = entries.iter().map(|&(i, t)| smooth_l1(data[i].as_f64() - t).0).sum();
        self.push(Tensor::scalar(T::from_f64_lossy(total / norm)), Op::SmoothL1 { x, entries, norm })
    }

    /// Cross-entropy of softmax over channels against per-pixel labels
    /// (−1 = ignored), summed and divided by `norm`.
    pub fn softmax_cross_entropy(&mut self, x: Var, labels: Vec<i16>, norm: f64) -> Result<Var> {
        let s = self.shape(x);
        if labels.len() != s.n * s.plane() {
            return Err(Error::config(format!("cross-entropy needs {} labels for {s}", s.n * s.plane())));
        }
        if labels.iter().any(|&l| l >= s.c as i16) {
            return Err(Error::config("cross-entropy label exceeds channel count"));
        }
        let probs = kernels::softmax_channels(self.value(x).data(), s);
        let plane = s.plane();
        let mut total = 0.0;
        for (idx, &l) in labels.iter().enumerate() {
            if l < 0 {
                continue;
            }
            let (n, p) = (idx / plane, idx % plane);
            let prob = probs[(n * s.c + l as usize) * plane + p].as_f64();
            total -= prob.max(f64::MIN_POSITIVE).ln();
        }
        self.push(Tensor::scalar(T::from_f64_lossy(total / norm)), Op::SoftmaxCe { x, labels, norm })
    }

    pub fn weighted_sum(&mut self, items: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in items {
            if self.shape(v) != Shape::scalar() {
                return Err(Error::config("weighted_sum takes scalars"));
            }
            total += w * self.value(v).item().as_f64();
        }
        self.push(Tensor::scalar(T::from_f64_lossy(total)), Op::WeightedSum(items.to_vec()))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != Shape::scalar() {
            return Err(Error::config(format!("backward from non-scalar {}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.op.inputs().iter().any(|v| v.0 >= i) {
                return Err(Error::Internal(format!("graph cycle at node {i} ({})", node.op.name())));
            }
            match &node.op {
                Op::Leaf => grads[i] = Some(dy),
                Op::Param(id) => {
                    params.push((*id, i));
                    grads[i] = Some(dy);
                }
                op => self.backward_op(op, &node.value, dy, &mut grads),
            }
        }
        Ok(Gradients { grads, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, &d)| *e += d),
            slot => *slot = Some(g),
        }
    }

    fn backward_op(&self, op: &Op, out: &Tensor<T>, dy: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let scalar_dy = dy[0].as_f64();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::Conv { x, w, b, spec } => {
                let xs = self.shape(*x);
                let os = out.shape();
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let g = kernels::conv2d_backward(self.value(*x).data(), xs, spec, self.value(*w).data(), &dy, os.h, os.w, need);
                if let Some(dx) = g.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = g.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                mean,
                inv_std,
                batch_stats,
            } => {
                let g = kernels::batch_norm_backward(
                    self.value(*x).data(),
                    self.shape(*x),
                    mean,
                    inv_std,
                    self.value(*scale).data(),
                    &dy,
                    *batch_stats,
                );
                self.accumulate(grads, *x, g.dx);
                self.accumulate(grads, *scale, g.dscale);
                self.accumulate(grads, *shift, g.dshift);
            }
            Op::Act { x, kind } => {
                let y = out.data();
                let dx: Vec<T> = match kind {
                    Activation::Tanh => y.iter().zip(&dy).map(|(&y, &g)| g * (T::one() - y * y)).collect(),
                    Activation::Sigmoid => y.iter().zip(&dy).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
                    Activation::LeakyRelu => {
                        let slope = T::from_f64_lossy(LEAKY_SLOPE);
                        self.value(*x)
                            .data()
                            .iter()
                            .zip(&dy)
                            .map(|(&v, &g)| if v > T::zero() { g } else { g * slope })
                            .collect()
                    }
                    Activation::SoftmaxChannels => kernels::softmax_channels_backward(y, &dy, out.shape()),
                };
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample { x, factor } => {
                let dx = kernels::block_sum(&dy, self.shape(*x), *factor);
                self.accumulate(grads, *x, dx);
            }
            Op::Gate { x, g } => {
                let s = self.shape(*x);
                let plane = s.plane();
                let gate_raw = self.value(*g).data();
                let gates: Vec<T> = gate_raw.iter().map(|v| v.tanh()).collect();
                let xv = self.value(*x).data();
                if self.needs(*x) {
                    let mut dx = dy.clone();
                    for (i, chunk) in dx.chunks_mut(plane).enumerate() {
                        let gc = gates[i % s.c];
                        chunk.iter_mut().for_each(|v| *v *= gc);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*g) {
                    let mut dg = vec![0.0f64; s.c];
                    for (i, (dchunk, xchunk)) in dy.chunks(plane).zip(xv.chunks(plane)).enumerate() {
                        dg[i % s.c] += dchunk.iter().zip(xchunk).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>();
                    }
                    let dg = dg
                        .iter()
                        .zip(&gates)
                        .map(|(&d, &t)| T::from_f64_lossy(d * (1.0 - t.as_f64() * t.as_f64())))
                        .collect();
                    self.accumulate(grads, *g, dg);
                }
            }
            Op::Add(inputs) => {
                for &v in inputs {
                    self.accumulate(grads, v, dy.clone());
                }
            }
            Op::Concat(inputs) => {
                let s0 = out.shape();
                let mut offset = 0;
                for &v in inputs {
                    let s = self.shape(v);
                    let img = s.c * s.plane();
                    if self.needs(v) {
                        let mut dx = Vec::with_capacity(s.numel());
                        for n in 0..s0.n {
                            let start = n * s0.c * s0.plane() + offset;
                            dx.extend_from_slice(&dy[start..start + img]);
                        }
                        self.accumulate(grads, v, dx);
                    }
                    offset += img;
                }
            }
            Op::Gather { x, cells } => {
                let s = self.shape(*x);
                let mut dx = vec![T::zero(); s.numel()];
                for (k, &(n, i, j)) in cells.iter().enumerate() {
                    for c in 0..s.c {
                        dx[s.index(n, c, i, j)] += dy[k * s.c + c];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let dx = vec![dy[0]; self.shape(*x).numel()];
                self.accumulate(grads, *x, dx);
            }
            Op::Focal {
                x,
                targets,
                alpha,
                gamma,
                norm,
            } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(v, &t)| {
                        if t < 0 {
                            T::zero()
                        } else {
                            let d = focal_on_logit(v.as_f64(), t == 1, *alpha, *gamma).1;
                            T::from_f64_lossy(scalar_dy * d / norm)
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::SmoothL1 { x, entries, norm } => {
                let data = self.value(*x).data();
                let mut dx = vec![T::zero(); data.len()];
                for &(i, t) in entries {
                    let d = smooth_l1(data[i].as_f64() - t).1;
                    dx[i] += T::from_f64_lossy(scalar_dy * d / norm);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxCe { x, labels, norm } => {
                let s = self.shape(*x);
                let plane = s.plane();
                let probs = kernels::softmax_channels(self.value(*x).data(), s);
                let mut dx = vec![T::zero(); s.numel()];
                for (idx, &l) in labels.iter().enumerate() {
                    if l < 0 {
                        continue;
                    }
                    let (n, p) = (idx / plane, idx % plane);
                    for c in 0..s.c {
                        let i = (n * s.c + c) * plane + p;
                        let target = if c == l as usize { 1.0 } else { 0.0 };
                        dx[i] = T::from_f64_lossy(scalar_dy * (probs[i].as_f64() - target) / norm);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::WeightedSum(items) => {
                for &(v, w) in items {
                    self.accumulate(grads, v, vec![T::from_f64_lossy(scalar_dy * w)]);
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Float> Gradients<T> {
    /// Gradient at a node (inputs and parameters keep theirs).
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of a parameter summed over every use; `None` when the
    /// parameter was never reached.
    pub fn param(&self, id: ParamId) -> Option<Vec<T>> {
        let mut total: Option<Vec<T>> = None;
        for &(pid, node) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                match &mut total {
                    Some(t) => t.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    None => total = Some(g.clone()),
                }
            }
        }
        total
    }

    /// Add every parameter gradient into the store's grad buffers.
    /// Trainable parameters not on any path keep a zero gradient.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for id in store.trainable_ids() {
            let t = store.tensor_mut(id);
            if t.grad.is_none() {
                t.zero_grad();
            }
        }
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                if let Some(buf) = store.tensor_mut(id).grad.as_mut() {
                    buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Shape, Vec<f64>)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(name, s, v)| {
                store
                    .add(*name, Tensor::from_vec(*s, v.clone()).unwrap(), ParamKind::Trainable)
                    .unwrap()
            })
            .collect();
        (store, ids)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let (store, ids) = store_with(&[("x", Shape::new(1, 2, 2, 2), vec![0.5; 8])]);
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.param(ids[0]).unwrap();
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(ids[0]).unwrap(), vec![1.0; 8]);
    }

    #[test]
    fn gate_gradient_at_zero_is_channel_sum() {
        let x: Vec<f64> = (0..8).map(|v| v as f64 * 0.25 - 1.0).collect();
        let (store, ids) = store_with(&[
            ("x", Shape::new(1, 2, 2, 2), x.clone()),
            ("g", Shape::new(1, 2, 1, 1), vec![0.0, 0.0]),
        ]);
        let mut g = Graph::new(&store, Mode::Train);
        let xv = g.param(ids[0]).unwrap();
        let gv = g.param(ids[1]).unwrap();
        let y = g.channel_gate(xv, gv).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        let dg = grads.param(ids[1]).unwrap();
        assert!((dg[0] - x[..4].iter().sum::<f64>()).abs() < 1e-12);
        assert!((dg[1] - x[4..].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let (mut store, ids) = store_with(&[
            ("used", Shape::new(1, 1, 1, 2), vec![1.0, 2.0]),
            ("unused", Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]),
        ]);
        let grads = {
            let mut g = Graph::new(&store, Mode::Train);
            let x = g.param(ids[0]).unwrap();
            let loss = g.sum(x).unwrap();
            g.backward(loss).unwrap()
        };
        assert!(grads.param(ids[1]).is_none());
        store.zero_grad();
        grads.accumulate_into(&mut store);
        assert_eq!(store.tensor(ids[1]).grad.as_ref().unwrap(), &vec![0.0; 3]);
        assert_eq!(store.tensor(ids[0]).grad.as_ref().unwrap(), &vec![1.0; 2]);
    }

    #[test]
    fn activations_at_reference_points() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Infer);
        let x = g.input(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, -2.0]).unwrap()).unwrap();
        let t = g.activation(x, Activation::Tanh).unwrap();
        let s = g.activation(x, Activation::Sigmoid).unwrap();
        let l = g.activation(x, Activation::LeakyRelu).unwrap();
        assert_eq!(g.value(t).data()[0], 0.0);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert!((g.value(l).data()[1] + 0.2).abs() < 1e-15);
        let z = g.input(Tensor::zeros(Shape::new(1, 2, 2, 2))).unwrap();
        let sm = g.activation(z, Activation::SoftmaxChannels).unwrap();
        assert!(g.value(sm).data().iter().all(|&v| v == 0.5));
        let one = g.input(Tensor::zeros(Shape::new(1, 1, 2, 2))).unwrap();
        assert!(g.activation(one, Activation::SoftmaxChannels).is_err());
    }

    #[test]
    fn merge_shapes_and_errors() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store, Mode::Infer);
        let a = g.input(Tensor::zeros(Shape::new(1, 4, 2, 2))).unwrap();
        let b = g.input(Tensor::zeros(Shape::new(1, 8, 2, 2))).unwrap();
        let c = g.input(Tensor::zeros(Shape::new(1, 16, 2, 2))).unwrap();
        let cat = g.merge(&[a, b, c], MergeMode::ConcatChannels).unwrap();
        assert_eq!(g.shape(cat).c, 28);
        assert!(g.merge(&[a, b], MergeMode::Add).is_err());
        let d = g.input(Tensor::zeros(Shape::new(1, 4, 3, 2))).unwrap();
        assert!(g.merge(&[a, d], MergeMode::ConcatChannels).is_err());
    }

    #[test]
    fn non_finite_output_is_reported() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store, Mode::Infer);
        let x = g.input(Tensor::full(Shape::new(1, 1, 1, 1), f32::MAX)).unwrap();
        let y = g.input(Tensor::full(Shape::new(1, 1, 1, 1), f32::MAX)).unwrap();
        match g.merge(&[x, y], MergeMode::Add) {
            Err(Error::Numeric { op }) => assert_eq!(op, "merge_add"),
            other => panic!("expected numeric error, got {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn focal_reference_values() {
        assert!((focal_loss(0.5, 1.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((focal_loss(0.9, 0.25, 2.0) - 0.25 * 0.01 * 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!(focal_loss(1.0 - 1e-9, 0.25, 2.0) < 1e-15);
    }
}
