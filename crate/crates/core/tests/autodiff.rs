mod common;

use std::time::Instant;

use dwd_core::autodiff::{Graph, Tensor};
use proptest::prelude::*;

#[test]
fn every_op_matches_central_differences() {
    let t = Instant::now();
    let results = common::gradient_suite(10, 11).unwrap();
    for (name, err) in &results {
        assert!(*err <= 1e-4, "{name}: relative error {err:e}");
    }
    assert!(results.len() >= 20);
    assert!(t.elapsed().as_secs_f64() < 10.0, "took {:?}", t.elapsed());
}

#[test]
fn chained_network_gradients() {
    // a two-layer tanh net with a softmax cross-entropy head
    let mut rng = dwd_core::stochastic::RngStream::new(3, "chain");
    let mut draw = |s: &[usize]| {
        let n = s.iter().product();
        Tensor::new(s.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    };
    let inputs = [draw(&[4, 5]), draw(&[5, 6]), draw(&[6]), draw(&[6, 3])];
    let res = dwd_core::autodiff::check::check_gradients(&inputs, 1e-4, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_row(h, v[2])?;
        let h = g.tanh(h)?;
        let o = g.matmul(h, v[3])?;
        let lp = g.log_softmax(o)?;
        let picked = g.pick_cols(lp, &[0, 2, 1, 2])?;
        let m = g.mean(picked)?;
        g.scale(m, -1.0)
    })
    .unwrap();
    assert!(res.passes(1e-4), "{res:?}");
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a[i * k + l] * b[l * n + j];
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        xs in prop::collection::vec(-30.0f64..30.0, 1..40),
    ) {
        let cols = (xs.len() / rows).max(1);
        let data: Vec<f64> = xs.iter().cycle().take(rows * cols).copied().collect();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![rows, cols], data).unwrap());
        let s = g.softmax(x).unwrap();
        let ls = g.log_softmax(x).unwrap();
        for (row, lrow) in g.value(s).chunks(cols).zip(g.value(ls).chunks(cols)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (p, l) in row.iter().zip(lrow) {
                prop_assert!(*p >= 0.0);
                prop_assert!((p.ln().max(-700.0) - l.max(-700.0)).abs() < 1e-9 || *p == 0.0);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(xs in prop::collection::vec(-10.0f64..10.0, 2..10), c in -50.0f64..50.0) {
        let n = xs.len();
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![1, n], xs.clone()).unwrap());
        let b = g.leaf(Tensor::new(vec![1, n], xs.iter().map(|x| x + c).collect()).unwrap());
        let (sa, sb) = (g.softmax(a).unwrap(), g.softmax(b).unwrap());
        for (p, q) in g.value(sa).iter().zip(g.value(sb)) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_naive(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
        let mut rng = dwd_core::stochastic::RngStream::new(seed, "mm");
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let mut g = Graph::new();
        let va = g.leaf(Tensor::new(vec![m, k], a.clone()).unwrap());
        let vb = g.leaf(Tensor::new(vec![k, n], b.clone()).unwrap());
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).iter().zip(naive_matmul(&a, &b, m, k, n)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
