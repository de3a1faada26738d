//! Gated feature pyramid and atrous spatial pyramid pooling.
//!
//! Each backbone level passes a 1×1 lateral conv to `N` channels and a
//! per-channel `tanh` gate before additive top-down fusion:
//! `P5 = gate(C5)`, `P4 = gate(C4) + up2(P5)`, `P3 = gate(C3) + up2(P4)`.

use crate::autodiff::{Graph, MergeMode, Var};
use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBn, Init};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{ConvSpec, Float, Shape, Tensor};

pub const LEVELS: usize = 3;
pub const LEVEL_NAMES: [&str; LEVELS] = ["p3", "p4", "p5"];
pub const LEVEL_STRIDES: [usize; LEVELS] = [8, 16, 32];

/// Initial gate parameter; `tanh(1) ≈ 0.76`.
const GATE_INIT: f32 = 1.0;

#[derive(Clone, Debug)]
pub struct GatedFpn {
    pub channels: usize,
    pub laterals: Vec<Conv2d>,
    pub gates: Vec<ParamId>,
}

impl GatedFpn {
    pub fn build(store: &mut ParamStore, init: &mut Init, in_channels: [usize; LEVELS], channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("fpn_channels must be positive"));
        }
        let mut laterals = Vec::with_capacity(LEVELS);
        let mut gates = Vec::with_capacity(LEVELS);
        for (name, &cin) in LEVEL_NAMES.iter().zip(&in_channels) {
            laterals.push(Conv2d::new(
                store,
                init,
                &format!("fpn.{name}.lateral"),
                ConvSpec::same(cin, channels, 1),
            )?);
            gates.push(store.add(
                format!("fpn.{name}.gate"),
                Tensor::full(Shape::new(1, channels, 1, 1), GATE_INIT),
                ParamKind::Trainable,
            )?);
        }
        Ok(Self { channels, laterals, gates })
    }

    fn gated<T: Float>(&self, g: &mut Graph<T>, level: usize, c: Var) -> Result<Var> {
        let lateral = self.laterals[level].forward(g, c)?;
        let gate = g.param(self.gates[level])?;
        g.channel_gate(lateral, gate)
    }

    /// Returns `[P3, P4, P5]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, pyr: &FeaturePyramid) -> Result<[Var; LEVELS]> {
        let (s3, s4, s5) = (g.shape(pyr.c3), g.shape(pyr.c4), g.shape(pyr.c5));
        if s3.h != 2 * s4.h || s4.h != 2 * s5.h || s3.w != 2 * s4.w || s4.w != 2 * s5.w {
            return Err(Error::config(format!(
                "pyramid levels {s3}, {s4}, {s5} are not successive halvings"
            )));
        }
        let p5 = self.gated(g, 2, pyr.c5)?;
        let g4 = self.gated(g, 1, pyr.c4)?;
        let up5 = g.upsample_nearest(p5, 2)?;
        let p4 = g.merge(&[g4, up5], MergeMode::Add)?;
        let g3 = self.gated(g, 0, pyr.c3)?;
        let up4 = g.upsample_nearest(p4, 2)?;
        let p3 = g.merge(&[g3, up4], MergeMode::Add)?;
        Ok([p3, p4, p5])
    }
}

/// Parallel 1×1 and dilated 3×3 branches, concatenated in the order
/// (1×1, rates...) and projected back to `N` channels by a 1×1 conv.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub branches: Vec<ConvBn>,
    pub project: ConvBn,
}

impl Aspp {
    pub fn build(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        rates: &[usize],
        branch_channels: usize,
    ) -> Result<Self> {
        let mut branches = vec![ConvBn::new(
            store,
            init,
            &format!("{name}.pointwise"),
            ConvSpec::same(channels, branch_channels, 1),
        )?];
        for &rate in rates {
            branches.push(ConvBn::new(
                store,
                init,
                &format!("{name}.dilation{rate}"),
                ConvSpec::same(channels, branch_channels, 3).with_dilation(rate),
            )?);
        }
        let project = ConvBn::new(
            store,
            init,
            &format!("{name}.project"),
            ConvSpec::same(branch_channels * branches.len(), channels, 1),
        )?;
        Ok(Self { branches, project })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let outs = self.branches.iter().map(|b| b.forward(g, x)).collect::<Result<Vec<_>>>()?;
        let cat = g.merge(&outs, MergeMode::ConcatChannels)?;
        self.project.forward(g, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;

    fn pyramid_inputs<'a>(g: &mut Graph<'a, f32>, n: usize) -> FeaturePyramid {
        let fill = |c: usize, h: usize, seed: f32| {
            let s = Shape::new(n, c, h, h);
            let data = (0..s.numel()).map(|i| ((i as f32 + seed) * 0.731).sin()).collect();
            Tensor::from_vec(s, data).unwrap()
        };
        FeaturePyramid {
            c3: g.input(fill(4, 8, 0.0)).unwrap(),
            c4: g.input(fill(6, 4, 1.0)).unwrap(),
            c5: g.input(fill(8, 2, 2.0)).unwrap(),
        }
    }

    #[test]
    fn zero_gates_kill_everything() {
        let mut store = ParamStore::new();
        let fpn = GatedFpn::build(&mut store, &mut Init::new(0), [4, 6, 8], 5).unwrap();
        for &id in &fpn.gates {
            store.tensor_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new(&store, Mode::Infer);
        let pyr = pyramid_inputs(&mut g, 1);
        let ps = fpn.forward(&mut g, &pyr).unwrap();
        for p in ps {
            assert!(g.value(p).data().iter().all(|&v| v == 0.0));
            assert_eq!(g.shape(p).c, 5);
        }
    }

    #[test]
    fn zero_top_gate_leaves_p4_lateral() {
        let mut store = ParamStore::new();
        let fpn = GatedFpn::build(&mut store, &mut Init::new(0), [4, 6, 8], 5).unwrap();
        store.tensor_mut(fpn.gates[2]).data_mut().fill(0.0);
        let mut g = Graph::new(&store, Mode::Infer);
        let pyr = pyramid_inputs(&mut g, 2);
        let [_, p4, p5] = fpn.forward(&mut g, &pyr).unwrap();
        assert!(g.value(p5).data().iter().all(|&v| v == 0.0));
        let expected = fpn.gated(&mut g, 1, pyr.c4).unwrap();
        assert_eq!(g.value(p4).data(), g.value(expected).data());
    }

    #[test]
    fn aspp_preserves_spatial_size() {
        let mut store = ParamStore::new();
        let aspp = Aspp::build(&mut store, &mut Init::new(2), "aspp", 6, &[1, 2, 4], 3).unwrap();
        for hw in [(9, 9), (12, 10), (13, 13)] {
            let mut g = Graph::new(&store, Mode::Infer);
            let x = g.input(Tensor::full(Shape::new(1, 6, hw.0, hw.1), 0.3)).unwrap();
            let y = aspp.forward(&mut g, x).unwrap();
            assert_eq!(g.shape(y), Shape::new(1, 6, hw.0, hw.1));
        }
    }

    #[test]
    fn aspp_zero_weights_give_zero_output() {
        let mut store = ParamStore::new();
        let aspp = Aspp::build(&mut store, &mut Init::new(2), "aspp", 4, &[1, 2, 4], 2).unwrap();
        for b in aspp.branches.iter().chain(std::iter::once(&aspp.project)) {
            store.tensor_mut(b.conv.weight).data_mut().fill(0.0);
        }
        let mut g = Graph::new(&store, Mode::Infer);
        let x = g.input(Tensor::full(Shape::new(1, 4, 9, 9), 1.0)).unwrap();
        let y = aspp.forward(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dilation_four_impulse_response() {
        // Single-branch probe: all-ones 3×3 kernel at dilation 4 on a 9×9
        // impulse. Nonzero responses sit exactly at offsets {-4, 0, 4}.
        let mut store = ParamStore::new();
        let spec = ConvSpec::same(1, 1, 3).with_dilation(4).without_bias();
        let conv = Conv2d::new(&mut store, &mut Init::new(0), "probe", spec).unwrap();
        store.tensor_mut(conv.weight).data_mut().fill(1.0);
        let mut impulse = vec![0.0f32; 81];
        impulse[4 * 9 + 4] = 1.0;
        let mut g = Graph::new(&store, Mode::Infer);
        let x = g.input(Tensor::from_vec(Shape::new(1, 1, 9, 9), impulse).unwrap()).unwrap();
        let y = conv.forward(&mut g, x).unwrap();
        let out = g.value(y).data();
        for r in 0..9 {
            for c in 0..9 {
                let on_grid = [0, 4, 8].contains(&r) && [0, 4, 8].contains(&c);
                assert_eq!(out[r * 9 + c] != 0.0, on_grid, "({r},{c})");
            }
        }
    }
}
