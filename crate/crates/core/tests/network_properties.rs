use minconv::network::Model;
use minconv::{CellKind, ModelSpec, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn frames<T: minconv::Scalar>(t: usize, seed: u64) -> Tensor<T> {
    Tensor::uniform(&[2, t, 1, 6, 6], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn small(kind: CellKind) -> ModelSpec {
    ModelSpec::new(kind, 4, 2)
}

fn kinds() -> impl Strategy<Value = CellKind> {
    prop::sample::select(CellKind::ALL.to_vec())
}

fn cat(parts: &[&Tensor<f32>]) -> Tensor<f32> {
    Tensor::concat(parts, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    /// Feeding the rollout's own outputs back under teacher forcing reproduces it.
    #[test]
    fn teacher_forcing_on_own_predictions_matches_rollout(kind in kinds(), seed in 0u64..1000) {
        let model = Model::<f32>::build(small(kind), seed).unwrap();
        let ctx = frames::<f32>(5, seed ^ 9);
        let steps = 4;
        let roll = model.rollout(&ctx, steps).unwrap();
        let fed = cat(&[&ctx, &roll.narrow(1, 0, steps - 1).unwrap()]);
        let tf = model.forward_tf(&fed).unwrap();
        let tail = tf.narrow(1, 4, steps).unwrap();
        prop_assert!(tail.max_abs_diff(&roll) <= 1e-5, "{kind}: {}", tail.max_abs_diff(&roll));
    }

    #[test]
    fn predictions_are_causal(kind in kinds(), seed in 0u64..1000) {
        let model = Model::<f64>::build(small(kind), seed).unwrap();
        let x = frames::<f64>(6, seed);
        // Perturb frames 3.. of the second sample only.
        let mut y = x.clone();
        let plane = 36;
        for v in &mut y.data_mut()[(6 + 3) * plane..] {
            *v += 0.5;
        }
        let (px, py) = (model.forward_tf(&x).unwrap(), model.forward_tf(&y).unwrap());
        let keep0 = px.narrow(0, 0, 1).unwrap();
        prop_assert_eq!(keep0, py.narrow(0, 0, 1).unwrap());
        let early_x = px.narrow(0, 1, 1).unwrap().narrow(1, 0, 3).unwrap();
        let early_y = py.narrow(0, 1, 1).unwrap().narrow(1, 0, 3).unwrap();
        prop_assert_eq!(early_x, early_y);
    }

    #[test]
    fn periodic_model_commutes_with_shifts(kind in kinds(), dy in -6isize..6, dx in -6isize..6, seed in 0u64..1000) {
        let model = Model::<f64>::build(small(kind), seed).unwrap();
        let x = frames::<f64>(4, seed);
        let lhs = model.forward_tf(&x.roll2d(dy, dx)).unwrap();
        let rhs = model.forward_tf(&x).unwrap().roll2d(dy, dx);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }
}

/// With every layer's norm scale and shift at zero the residual stream skips
/// the cells, so changing cell weights changes nothing.
#[test]
fn zeroed_layer_norms_make_cells_a_skip() {
    for kind in CellKind::ALL {
        let mut model = Model::<f64>::build(small(kind), 3).unwrap();
        for l in &mut model.layers {
            l.gamma = Tensor::zeros(l.gamma.shape());
            l.beta = Tensor::zeros(l.beta.shape());
        }
        let x = frames::<f64>(5, 4);
        let before = model.forward_tf(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for l in &mut model.layers {
            for t in l.cell.tensors_mut() {
                *t = Tensor::uniform(t.shape(), -2.0, 2.0, &mut rng);
            }
        }
        let after = model.forward_tf(&x).unwrap();
        assert!(before.max_abs_diff(&after) <= 1e-14, "{kind}");
        let layers = model.layers.len();
        model.layers.clear();
        model.spec.layers = 0;
        if let Ok(bare) = model.forward_tf(&x) {
            assert!(bare.max_abs_diff(&after) <= 1e-14, "{kind} with {layers} layers removed");
        }
    }
}

#[test]
fn geopotential_preset_counts_match_formula() {
    for kind in CellKind::ALL {
        let spec = ModelSpec::geopotential(kind);
        let model = Model::<f32>::build(spec, 0).unwrap();
        assert_eq!(model.param_count(), spec.param_count_formula(), "{kind}");
        println!("geopotential {kind}: c={} params={}", spec.channels, model.param_count());
    }
}
