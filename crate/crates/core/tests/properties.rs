use avsync::diffnum::{Graph, Tensor};
use avsync::discriminator::{d_hinge_loss, window_starts};
use avsync::eval::{confidence, pick_offset};
use avsync::generator::{GeneratorConfig, GeneratorModel};
use avsync::pyramid::{build_pyramid, build_pyramid_var, min_length};
use avsync::training::rec_loss;
use avsync::{FRAME_DIM, NUM_LEVELS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constants_survive_every_level(len in 40usize..600, c in -1e3f64..1e3) {
        let lv = build_pyramid(&Tensor::full(&[len, 2], c), NUM_LEVELS).unwrap();
        for (i, t) in lv.iter().enumerate() {
            prop_assert_eq!(t.shape()[0], len >> i);
            prop_assert!(t.data().iter().all(|&v| v == c));
        }
    }

    #[test]
    fn graph_pyramid_matches_direct_loop(len in 40usize..200, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[len, 3], 1.0, &mut rng);
        let direct = build_pyramid(&x, NUM_LEVELS).unwrap();
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![1, len, 3], x.data().to_vec()).unwrap());
        let lv = build_pyramid_var(&mut g, v, NUM_LEVELS).unwrap();
        for (a, b) in direct.iter().zip(&lv) {
            let b = g.value(*b);
            prop_assert_eq!(a.len(), b.len());
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn short_inputs_are_rejected(len in 1usize..40) {
        prop_assert!(len < min_length(NUM_LEVELS));
        prop_assert!(build_pyramid(&Tensor::zeros(&[len, 1]), NUM_LEVELS).is_err());
    }

    #[test]
    fn critic_windows_stay_inside(len in 0usize..200, w in prop::sample::select(vec![4usize, 8, 16, 32])) {
        let starts = window_starts(len, w);
        prop_assert_eq!(starts.is_empty(), w > len);
        for pair in starts.windows(2) {
            prop_assert_eq!(pair[1] - pair[0], w / 2);
        }
        if let Some(&last) = starts.last() {
            prop_assert!(last + w <= len && len - (last + w) < w / 2);
        }
    }

    #[test]
    fn hinge_loss_is_nonnegative_and_zero_beyond_the_margins(
        real in prop::collection::vec(-3.0f64..3.0, 1..12),
        fake in prop::collection::vec(-3.0f64..3.0, 1..12),
    ) {
        let mut g = Graph::new();
        let (r, f) = (g.constant(Tensor::from_vec(real.clone())), g.constant(Tensor::from_vec(fake.clone())));
        let l = d_hinge_loss(&mut g, r, f).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
        let r = g.constant(Tensor::from_vec(real.iter().map(|v| v.abs() + 1.0).collect()));
        let f = g.constant(Tensor::from_vec(fake.iter().map(|v| -v.abs() - 1.0).collect()));
        let l = d_hinge_loss(&mut g, r, f).unwrap();
        prop_assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn reconstruction_is_a_symmetric_nonnegative_distance(seed in any::<u64>(), b in 1usize..4, t in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[b, t, FRAME_DIM], 1.0, &mut rng);
        let y = Tensor::randn(&[b, t, FRAME_DIM], 1.0, &mut rng);
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x), g.constant(y));
        let (xy, yx, xx) = (rec_loss(&mut g, xv, yv).unwrap(), rec_loss(&mut g, yv, xv).unwrap(), rec_loss(&mut g, xv, xv).unwrap());
        prop_assert!(g.value(xy).item() > 0.0);
        prop_assert_eq!(g.value(xy).item(), g.value(yx).item());
        prop_assert_eq!(g.value(xx).item(), 0.0);
    }

    #[test]
    fn offsets_and_confidence_follow_the_score_curve(scores in prop::collection::vec(-1.0f64..1.0, 1..16)) {
        let scores: Vec<f64> = if scores.len() % 2 == 0 { scores[1..].to_vec() } else { scores };
        let r = (scores.len() / 2) as isize;
        let best = pick_offset(&scores);
        prop_assert!(best.abs() <= r);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(scores[(best + r) as usize], max);
        prop_assert!(confidence(&scores) >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn branch_weights_are_distributions_at_every_step(seed in any::<u64>(), scale in 0.0f64..2.0) {
        let mut gen = GeneratorModel::new(GeneratorConfig { dim: 8, layers: 1, heads: 2, ff_mult: 2 }, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in gen.params.iter_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-scale..=scale);
            }
        }
        let mut g = Graph::new();
        let p = gen.params.bind(&mut g, false);
        let x0 = g.constant(Tensor::randn(&[1, FRAME_DIM], 0.5, &mut rng));
        let audio = g.constant(Tensor::randn(&[1, 4 * 16, 26], 1.0, &mut rng));
        let r = gen.rollout_with(&mut g, &p, x0, audio, 16).unwrap();
        prop_assert_eq!(r.weights.len(), 15);
        for w in &r.weights {
            for row in g.value(*w).data().chunks(NUM_LEVELS) {
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
