mod common;

use dwd_core::stochastic::{gumbel_softmax, kl_categorical_uniform, RngStream};
use proptest::prelude::*;

#[test]
fn kl_matches_direct_sum_on_random_distributions() {
    let mut rng = RngStream::new(5, "kl");
    for i in 0..100 {
        let k = 2 + i % 30;
        let scale = [0.1, 1.0, 4.0][i % 3];
        let q = common::softmax(&common::random_logits(&mut rng, k, scale));
        let lp: Vec<f64> = q.iter().map(|p| p.ln()).collect();
        let kl = kl_categorical_uniform(&lp).unwrap();
        assert!((kl - common::kl_oracle(&q)).abs() < 1e-9, "instance {i}");
        assert!(kl >= -1e-12 && kl <= (k as f64).ln() + 1e-12);
    }
}

#[test]
fn kl_of_uniform_is_zero_for_every_k() {
    for k in 2..40 {
        let lp = vec![-(k as f64).ln(); k];
        assert!(kl_categorical_uniform(&lp).unwrap().abs() < 1e-12);
    }
}

#[test]
fn hard_index_frequencies_follow_softmax() {
    let z = common::gumbel_frequency_z(13, 5, 10_000);
    assert!(z < 3.0, "worst z {z}");
}

#[test]
fn streams_are_keyed_by_name() {
    let mut a = RngStream::new(1, "x");
    let mut b = RngStream::new(1, "y");
    let xa: Vec<u64> = (0..8).map(|_| a.below(1 << 30) as u64).collect();
    let xb: Vec<u64> = (0..8).map(|_| b.below(1 << 30) as u64).collect();
    assert_ne!(xa, xb);
    let mut c = RngStream::new(1, "x");
    assert_eq!(xa, (0..8).map(|_| c.below(1 << 30) as u64).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn kl_bounded_by_log_k(xs in prop::collection::vec(-20.0f64..20.0, 2..50)) {
        let q = common::softmax(&xs);
        let lp: Vec<f64> = q.iter().map(|p| p.ln().max(-745.0)).collect();
        let kl = kl_categorical_uniform(&lp).unwrap();
        prop_assert!(kl >= -1e-12);
        prop_assert!(kl <= (xs.len() as f64).ln() + 1e-9);
    }

    #[test]
    fn concrete_samples_are_on_the_simplex(
        xs in prop::collection::vec(-10.0f64..10.0, 2..12),
        tau in 0.05f64..5.0,
        seed in 0u64..10_000,
    ) {
        let mut rng = RngStream::new(seed, "simplex");
        let s = gumbel_softmax(&xs, tau, &mut rng).unwrap();
        prop_assert!((s.soft.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(s.soft.iter().all(|p| *p >= 0.0));
        prop_assert_eq!(s.hard_index, dwd_core::stochastic::argmax(&s.soft));
    }
}
