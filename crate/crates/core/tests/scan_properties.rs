use minconv::scan::{combine, scan, scan_backward, ScanCoeffs};
use minconv::{Backend, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn coeffs(b: usize, t: usize, lanes: usize, seed: u64) -> ScanCoeffs<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::uniform(&[b, t, lanes], 0.0, 1.0, &mut rng);
    let x = Tensor::uniform(&[b, t, lanes], -1.0, 1.0, &mut rng);
    let h0 = Tensor::uniform(&[b, lanes], -1.0, 1.0, &mut rng);
    ScanCoeffs::linear(a, x, h0).unwrap()
}

fn naive(c: &ScanCoeffs<f64>) -> Vec<f64> {
    let [b, t, lanes] = <[usize; 3]>::try_from(c.shape()).unwrap();
    let (a, x) = c.to_linear();
    let mut out = vec![0.0; b * t * lanes];
    for bi in 0..b {
        for l in 0..lanes {
            let mut h = c.h0().data()[bi * lanes + l];
            for s in 0..t {
                let i = (bi * t + s) * lanes + l;
                h = a.data()[i] * h + x.data()[i];
                out[i] = h;
            }
        }
    }
    out
}

fn dyadic(k: i32) -> f64 {
    k as f64 / 16.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blelloch_matches_sequential(b in 1usize..3, t in 1usize..70, lanes in 1usize..9, seed in any::<u64>()) {
        let c = coeffs(b, t, lanes, seed);
        let seq = scan(&c, Backend::Sequential).unwrap();
        let par = scan(&c, Backend::Blelloch).unwrap();
        prop_assert!(seq.max_abs_diff(&par) <= 1e-12);
        let oracle = naive(&c);
        prop_assert!(seq.data().iter().zip(&oracle).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn log_domain_matches_sequential_f32(t in 1usize..60, lanes in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f32>::uniform(&[1, t, lanes], 0.01, 1.0, &mut rng);
        let x = Tensor::<f32>::uniform(&[1, t, lanes], -1.0, 1.0, &mut rng);
        let h0 = Tensor::<f32>::uniform(&[1, lanes], -1.0, 1.0, &mut rng);
        let c = ScanCoeffs::linear(a, x, h0).unwrap();
        let seq = scan(&c, Backend::Sequential).unwrap();
        let log = scan(&c, Backend::LogDomain).unwrap();
        let rel = seq.data().iter().zip(log.data())
            .map(|(p, q)| (p - q).abs() / p.abs().max(1.0))
            .fold(0.0f32, f32::max);
        prop_assert!(rel <= 1e-4, "rel {rel}");
    }

    /// Convex weights (a, 1 - a) applied to candidates in [-1, 1] keep states in [-1, 1].
    #[test]
    fn convex_coefficients_stay_bounded(t in 1usize..80, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::uniform(&[1, t, 4], 0.0, 1.0, &mut rng);
        let cand = Tensor::<f64>::uniform(&[1, t, 4], -1.0, 1.0, &mut rng);
        let x = Tensor::new(&[1, t, 4], a.data().iter().zip(cand.data()).map(|(a, c)| (1.0 - a) * c).collect()).unwrap();
        let h0 = Tensor::<f64>::uniform(&[1, 4], -1.0, 1.0, &mut rng);
        let c = ScanCoeffs::linear(a, x, h0).unwrap();
        for backend in Backend::ALL {
            let h = scan(&c, backend).unwrap();
            prop_assert!(h.max_abs() <= 1.0 + 1e-12, "{}", backend.name());
        }
    }

    #[test]
    fn pair_operator_is_exactly_associative_on_dyadics(
        p in prop::array::uniform6(-16i32..=16),
    ) {
        let x = (dyadic(p[0]), dyadic(p[1]));
        let y = (dyadic(p[2]), dyadic(p[3]));
        let z = (dyadic(p[4]), dyadic(p[5]));
        prop_assert_eq!(combine(combine(x, y), z), combine(x, combine(y, z)));
    }

    #[test]
    fn backward_matches_reverse_loop(t in 1usize..40, lanes in 1usize..5, seed in any::<u64>()) {
        let c = coeffs(1, t, lanes, seed);
        let (a, _) = c.to_linear();
        let h = scan(&c, Backend::Sequential).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let g = Tensor::<f64>::uniform(&[1, t, lanes], -1.0, 1.0, &mut rng);
        let grads = scan_backward(&a, &h, c.h0(), &g, Backend::Sequential).unwrap();
        let par = scan_backward(&a, &h, c.h0(), &g, Backend::Blelloch).unwrap();
        for l in 0..lanes {
            let mut lam = 0.0;
            for s in (0..t).rev() {
                let i = s * lanes + l;
                let next = if s + 1 < t { a.data()[(s + 1) * lanes + l] * lam } else { 0.0 };
                lam = g.data()[i] + next;
                let prev = if s == 0 { c.h0().data()[l] } else { h.data()[(s - 1) * lanes + l] };
                prop_assert_eq!(grads.b.data()[i].to_bits(), lam.to_bits());
                prop_assert_eq!(grads.a.data()[i].to_bits(), (lam * prev).to_bits());
                prop_assert!((par.b.data()[i] - lam).abs() <= 1e-12);
            }
            prop_assert_eq!(grads.h0.data()[l].to_bits(), (a.data()[l] * lam).to_bits());
        }
    }
}

#[test]
fn single_step_is_one_affine_update() {
    let c = coeffs(2, 1, 3, 9);
    let (a, x) = c.to_linear();
    for backend in Backend::ALL {
        let h = scan(&c, backend).unwrap();
        for i in 0..6 {
            let want = a.data()[i] * c.h0().data()[i] + x.data()[i];
            assert!((h.data()[i] - want).abs() <= 1e-12, "{}", backend.name());
        }
    }
}
