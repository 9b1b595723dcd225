#![allow(dead_code)]

use dwd_core::autodiff::check::check_gradients;
use dwd_core::autodiff::{Graph, Tensor, Var};
use dwd_core::stochastic::RngStream;
use dwd_core::Result;

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

/// An op under test: input shapes and how to apply it to leaves.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
}

fn case(name: &'static str, shapes: &[&[usize]], build: Build) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build,
    }
}

/// Every differentiable graph op, each reduced to a scalar by a fixed
/// weighted sum so no partial is trivially symmetric.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])),
        case("bmm", &[&[2, 3, 4], &[2, 4, 2]], |g, v| g.bmm(v[0], v[1])),
        case("add", &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1])),
        case("sub", &[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1])),
        case("mul", &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1])),
        case("add_row", &[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1])),
        case("scale", &[&[5]], |g, v| g.scale(v[0], -1.7)),
        case("add_scalar", &[&[5]], |g, v| g.add_scalar(v[0], 0.3)),
        case("concat", &[&[2, 3], &[2, 1], &[2, 2]], |g, v| g.concat(v)),
        case("slice", &[&[3, 5]], |g, v| g.slice(v[0], 1, 3)),
        case("sum", &[&[2, 3]], |g, v| g.sum(v[0])),
        case("mean", &[&[2, 3]], |g, v| g.mean(v[0])),
        case("sum_rows", &[&[3, 4]], |g, v| g.sum_rows(v[0])),
        case("relu", &[&[6]], |g, v| g.relu(v[0])),
        case("tanh", &[&[6]], |g, v| g.tanh(v[0])),
        case("sigmoid", &[&[6]], |g, v| g.sigmoid(v[0])),
        case("exp", &[&[6]], |g, v| g.exp(v[0])),
        case("softmax", &[&[3, 4]], |g, v| g.softmax(v[0])),
        case("log_softmax", &[&[3, 4]], |g, v| g.log_softmax(v[0])),
        case("gather_rows", &[&[4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3])),
        case("pick_cols", &[&[3, 4]], |g, v| g.pick_cols(v[0], &[1, 3, 1])),
        case("dropout", &[&[6]], |g, v| g.dropout(v[0], &[true, false, true, true, false, true], 0.25)),
        case("weight_norm", &[&[4, 3], &[3]], |g, v| g.weight_norm(v[0], v[1])),
        case("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        case("kl_uniform", &[&[3, 4]], |g, v| {
            let lp = g.log_softmax(v[0])?;
            dwd_core::stochastic::kl_uniform_var(g, lp)
        }),
    ]
}

fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 + 0.37 * ((i * 7 % 11) as f64) - 1.3 * ((i % 2) as f64)).collect()
}

/// Draws inputs away from the relu kink and checks one instance.
pub fn check_case(c: &OpCase, rng: &mut RngStream, eps: f64) -> Result<f64> {
    let inputs: Vec<Tensor> = c
        .shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let data = (0..n)
                .map(|_| {
                    let x = rng.normal();
                    if x.abs() < 0.05 {
                        x.signum() * 0.05 + x
                    } else {
                        x
                    }
                })
                .collect();
            Tensor::new(s.clone(), data).unwrap()
        })
        .collect();
    let build = c.build;
    let res = check_gradients(&inputs, eps, |g, v| {
        let out = build(g, v)?;
        let n = g.value(out).len();
        let shape = g.shape(out).to_vec();
        let w = g.constant(&shape, weights(n))?;
        let m = g.mul(out, w)?;
        g.sum(m)
    })?;
    Ok(res.max_rel_err)
}

/// Worst relative error per op over `instances` random draws.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for c in op_cases() {
        let mut rng = RngStream::new(seed, c.name);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(check_case(&c, &mut rng, 1e-4)?);
        }
        out.push((c.name, worst));
    }
    Ok(out)
}

/// KL(q || uniform) by direct summation over probabilities.
pub fn kl_oracle(q: &[f64]) -> f64 {
    let k = q.len() as f64;
    q.iter().filter(|&&p| p > 0.0).map(|&p| p * (p / (1.0 / k)).ln()).sum()
}

pub fn random_logits(rng: &mut RngStream, k: usize, scale: f64) -> Vec<f64> {
    (0..k).map(|_| scale * rng.normal()).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Largest |z| of hard-index frequencies against softmax(logits) over
/// `draws` Gumbel-Softmax draws, for `vectors` random logit vectors.
pub fn gumbel_frequency_z(seed: u64, vectors: usize, draws: usize) -> f64 {
    let mut worst = 0.0f64;
    for v in 0..vectors {
        let mut rng = RngStream::new(seed, &format!("logits.{v}"));
        let k = 3 + v % 5;
        let logits = random_logits(&mut rng, k, 1.5);
        let p = softmax(&logits);
        let mut counts = vec![0usize; k];
        let mut noise = RngStream::new(seed, &format!("draws.{v}"));
        for _ in 0..draws {
            let s = dwd_core::stochastic::gumbel_softmax(&logits, 1.0, &mut noise).unwrap();
            counts[s.hard_index] += 1;
        }
        for (c, pk) in counts.iter().zip(&p) {
            let sigma = (pk * (1.0 - pk) / draws as f64).sqrt();
            let z = (*c as f64 / draws as f64 - pk).abs() / sigma.max(1e-12);
            worst = worst.max(z);
        }
    }
    worst
}

/// (draws with max(soft) >= 0.99, total draws) at temperature 0.01.
pub fn low_temperature_hardness(seed: u64, vectors: usize, draws: usize) -> (usize, usize) {
    let mut hard = 0;
    for v in 0..vectors {
        let mut rng = RngStream::new(seed, &format!("logits.{v}"));
        let logits = random_logits(&mut rng, 3 + v % 5, 1.5);
        let mut noise = RngStream::new(seed, &format!("cold.{v}"));
        for _ in 0..draws {
            let s = dwd_core::stochastic::gumbel_softmax(&logits, 0.01, &mut noise).unwrap();
            if s.soft.iter().cloned().fold(0.0, f64::max) >= 0.99 {
                hard += 1;
            }
        }
    }
    (hard, vectors * draws)
}

/// Distinct n-grams over all n-grams, counted with a plain list scan.
pub fn brute_diversity(corpus: &[Vec<&str>], n: usize) -> Option<f64> {
    let mut seen: Vec<Vec<&str>> = Vec::new();
    let mut total = 0;
    for s in corpus {
        if s.len() < n || n == 0 {
            continue;
        }
        for i in 0..=s.len() - n {
            total += 1;
            let gram = s[i..i + n].to_vec();
            if !seen.contains(&gram) {
                seen.push(gram);
            }
        }
    }
    (total > 0).then(|| 100.0 * seen.len() as f64 / total as f64)
}

/// Freshly initialised checkpoint of `variant`, labelled as stage 1.
pub fn untrained(variant: dwd_core::trainer::Variant, seed: u64) -> dwd_core::trainer::Checkpoint {
    use dwd_core::agents::{ModelConfig, QBot};
    use dwd_core::trainer::{Checkpoint, CheckpointMeta, Stage, TrainConfig};
    let config = TrainConfig::for_stage(Stage::Stage1, variant);
    Checkpoint {
        qbot: QBot::new(ModelConfig::default().with_z(variant.z_kind()), seed).unwrap(),
        meta: CheckpointMeta {
            stage: Stage::Stage1,
            variant,
            epoch: 0,
            config,
            metrics: Default::default(),
            history: Vec::new(),
        },
    }
}

pub fn group_hashes(ck: &dwd_core::trainer::Checkpoint) -> std::collections::BTreeMap<&'static str, String> {
    dwd_core::agents::QBot::groups()
        .into_iter()
        .map(|(name, prefix)| (name, ck.qbot.group_hash(prefix)))
        .collect()
}

/// Groups whose hash differs between two checkpoints.
pub fn changed_groups(a: &dwd_core::trainer::Checkpoint, b: &dwd_core::trainer::Checkpoint) -> Vec<&'static str> {
    let (ha, hb) = (group_hashes(a), group_hashes(b));
    ha.iter().filter(|(k, v)| hb[*k] != **v).map(|(k, _)| *k).collect()
}

/// Small stage-2 run settings for contract checks.
pub fn tiny_stage2(stage: dwd_core::trainer::Stage, variant: dwd_core::trainer::Variant, epochs: usize) -> dwd_core::trainer::TrainConfig {
    let mut cfg = dwd_core::trainer::TrainConfig::for_stage(stage, variant);
    cfg.epochs = epochs;
    cfg.games_per_epoch = 64;
    cfg.rounds = 2;
    cfg
}

/// Twenty small corpora for the n-gram diversity oracle.
pub fn corpora() -> Vec<Vec<Vec<&'static str>>> {
    let w = |s: &'static str| s.split(' ').collect::<Vec<_>>();
    vec![
        vec![w("a")],
        vec![w("a b c")],
        vec![w("a a a a")],
        vec![w("a b"), w("a b")],
        vec![w("a b c"), w("c b a")],
        vec![w("is there a red circle ?"), w("is there a blue circle ?")],
        vec![w("how many small ?"); 5],
        vec![w("a b a b a b")],
        vec![w("x"), w("y"), w("z"), w("x")],
        vec![w("p q r s t u v"), w("q r s")],
        vec![w("is it large ?"), w("is it small ?"), w("is it red ?")],
        vec![w("a b c d"), w("b c d e"), w("c d e f")],
        vec![w("one two"), w("two one"), w("one one"), w("two two")],
        vec![w("m n o"), w("m n"), w("m")],
        vec![w("is there a green square ?"), w("how many square ?"), w("is there a green triangle ?")],
        vec![w("a b c a b c a b c")],
        vec![w("k"); 9],
        vec![w("s t"), w("t s"), w("s t"), w("t s")],
        vec![w("u v w x y"), w("y x w v u")],
        vec![w("how many red ?"), w("how many blue ?"), w("how many red ?"), w("is it red ?")],
    ]
}
