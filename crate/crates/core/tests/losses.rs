use dasnet_core::autodiff::{Graph, Mode};
use dasnet_core::train::focal_loss;
use dasnet_core::{ParamStore, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn focal_with_gamma_zero_alpha_one_is_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let p: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        let bce = -p.ln();
        assert!((focal_loss(p, 1.0, 0.0) - bce).abs() < 1e-7, "p = {p}");
    }
}

#[test]
fn focal_decreases_in_p_t() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let a: f64 = rng.random_range(1e-4..1.0 - 1e-4);
        let b: f64 = rng.random_range(1e-4..1.0 - 1e-4);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        for gamma in [0.0, 1.0, 2.0] {
            assert!(focal_loss(lo, 0.25, gamma) >= focal_loss(hi, 0.25, gamma));
        }
    }
}

#[test]
fn graph_focal_matches_scalar_reduction() {
    // Independent per-element evaluation of the graph op on logits.
    let logits = [-3.0, -0.5, 0.0, 0.7, 2.5, 4.0];
    let targets: Vec<i8> = vec![0, 1, -1, 0, 1, 1];
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, Mode::Train);
    let x = g.input(Tensor::from_vec(Shape::new(1, 6, 1, 1), logits.to_vec()).unwrap()).unwrap();
    let l = g.focal_loss(x, targets.clone(), 0.25, 2.0, 3.0).unwrap();
    let mut expect = 0.0;
    for (z, t) in logits.iter().zip(&targets) {
        let p = 1.0 / (1.0 + (-z).exp());
        expect += match t {
            1 => focal_loss(p, 0.25, 2.0),
            0 => focal_loss(1.0 - p, 0.75, 2.0),
            _ => 0.0,
        };
    }
    assert!((g.value(l).item() - expect / 3.0).abs() < 1e-12);
}
