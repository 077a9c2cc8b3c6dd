//! Oracles shared by the unit suites and the acceptance run.
#![allow(dead_code)]

use std::sync::Arc;

use drnet::attention::{relative_position_index, AttentionParams};
use drnet::tensor::finite_diff_check;
use drnet::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain multi-head attention over all pixels of a `[H, W, C]` window, in f64.
pub fn dense_attention(x: &Tensor, p: &AttentionParams<Tensor>, heads: usize, win: usize) -> Vec<f64> {
    let (t, c) = (x.shape()[0] * x.shape()[1], x.shape()[2]);
    let d = c / heads;
    let xs = x.data();
    let affine = |w: &Tensor, b: &Tensor, row: &[f64]| -> Vec<f64> {
        let (dout, din) = (w.shape()[0], w.shape()[1]);
        (0..dout)
            .map(|o| b.data()[o] as f64 + (0..din).map(|i| w.data()[o * din + i] as f64 * row[i]).sum::<f64>())
            .collect()
    };
    let qkv: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let row: Vec<f64> = xs[i * c..(i + 1) * c].iter().map(|&v| v as f64).collect();
            affine(&p.qkv.weight, &p.qkv.bias, &row)
        })
        .collect();
    let rel = relative_position_index(win);
    let span2 = (2 * win - 1) * (2 * win - 1);
    let mut merged = vec![vec![0.0; c]; t];
    for h in 0..heads {
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| {
                    let dot: f64 = (0..d).map(|k| qkv[i][h * d + k] * qkv[j][c + h * d + k]).sum();
                    dot / (d as f64).sqrt() + p.rel_bias_table.data()[h * span2 + rel[i * t + j] as usize] as f64
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for k in 0..d {
                merged[i][h * d + k] = (0..t).map(|j| e[j] / z * qkv[j][2 * c + h * d + k]).sum();
            }
        }
    }
    merged
        .iter()
        .flat_map(|row| affine(&p.proj.weight, &p.proj.bias, row))
        .collect()
}

pub type Build = fn(&mut ChaCha8Rng) -> Vec<Tensor>;
pub type Op = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

pub struct OpCase {
    pub name: &'static str,
    pub eps: f32,
    pub build: Build,
    pub op: Op,
}

pub const GRAD_TOL: f64 = 1e-3;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn dims(rng: &mut ChaCha8Rng, max_numel: usize) -> Vec<usize> {
    loop {
        let rank = rng.random_range(1..=3);
        let d: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=5)).collect();
        if d.iter().product::<usize>() <= max_numel {
            return d;
        }
    }
}

fn one(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![rand_t(&dims(rng, 64), rng)]
}

fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let d = dims(rng, 64);
    vec![rand_t(&d, rng), rand_t(&d, rng)]
}

fn case(name: &'static str, build: Build, op: Op) -> OpCase {
    OpCase { name, eps: 1e-2, build, op }
}

/// Every differentiable tape op with an input generator of at most 64
/// elements per tensor.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", pair, |_, v| v[0].add(&v[1])),
        case("sub", pair, |_, v| v[0].sub(&v[1])),
        case("mul", pair, |_, v| v[0].mul(&v[1])),
        case("scale", one, |_, v| Ok(v[0].scale(-1.7))),
        case("gelu", one, |_, v| Ok(v[0].gelu())),
        case("softmax", one, |_, v| Ok(v[0].softmax())),
        case("sum", one, |_, v| Ok(v[0].sum().scale(0.5))),
        case("mean", one, |_, v| Ok(v[0].mean())),
        case("reshape", one, |_, v| {
            let n = v[0].numel();
            v[0].reshape(&[n])
        }),
        case(
            "l1_loss",
            |rng| {
                // residuals kept away from the kink at zero
                let x = rand_t(&dims(rng, 64), rng);
                let target = x.map(|v| v + if v > 0.0 { -0.3 } else { 0.3 });
                vec![x, target]
            },
            |_, v| v[0].l1_loss(&v[1]),
        ),
        case(
            "add_broadcast",
            |rng| {
                let (r, c) = (rng.random_range(1..=6), rng.random_range(1..=6));
                vec![rand_t(&[r, c], rng), rand_t(&[c], rng)]
            },
            |_, v| v[0].add_broadcast(&v[1]),
        ),
        case(
            "linear",
            |rng| {
                let (r, i, o) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5));
                vec![rand_t(&[r, i], rng), rand_t(&[o, i], rng), rand_t(&[o], rng)]
            },
            |_, v| v[0].linear(&v[1], Some(&v[2])),
        ),
        case(
            "bmm",
            |rng| {
                let (b, m, k, n) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
                vec![rand_t(&[b, m, k], rng), rand_t(&[b, k, n], rng)]
            },
            |_, v| v[0].bmm(&v[1]),
        ),
        case(
            "bmm_nt",
            |rng| {
                let (b, m, k, n) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
                vec![rand_t(&[b, m, k], rng), rand_t(&[b, n, k], rng)]
            },
            |_, v| v[0].bmm_nt(&v[1]),
        ),
        case(
            "conv2d",
            |rng| {
                let s = [1, 3][rng.random_range(0..2)];
                let (ci, co) = (rng.random_range(1..=2), rng.random_range(1..=2));
                let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
                vec![rand_t(&[ci, h, w], rng), rand_t(&[co, ci, s, s], rng), rand_t(&[co], rng)]
            },
            |_, v| v[0].conv2d(&v[1], Some(&v[2])),
        ),
        OpCase {
            name: "layer_norm",
            // low-variance rows curve sharply; the default step overshoots
            eps: 3e-3,
            build: |rng| {
                let (r, d) = (rng.random_range(1..=4), rng.random_range(3..=8));
                vec![rand_t(&[r, d], rng), rand_t(&[d], rng), rand_t(&[d], rng)]
            },
            op: |_, v| v[0].layer_norm(&v[1], &v[2], 1e-5),
        },
        case(
            "gather",
            |rng| vec![rand_t(&[rng.random_range(1..=32)], rng)],
            |_, v| {
                // repeated and skipped indices
                let n = v[0].numel();
                let index: Vec<u32> = (0..n + 3).map(|i| ((i * 7 + 1) % n) as u32).collect();
                let len = index.len();
                v[0].gather(Arc::new(index), &[len])
            },
        ),
        case(
            "concat0",
            |rng| {
                let c = rng.random_range(1..=4);
                vec![rand_t(&[rng.random_range(1..=4), c], rng), rand_t(&[rng.random_range(1..=4), c], rng)]
            },
            |_, v| Var::concat0(&[&v[0], &v[1], &v[0]]),
        ),
        case(
            "slice0",
            |rng| vec![rand_t(&[rng.random_range(2..=6), 3], rng)],
            |_, v| v[0].slice0(1, v[0].shape()[0] - 1),
        ),
        case(
            "weighted_sum",
            |rng| {
                let d = dims(rng, 16);
                vec![rand_t(&d, rng), rand_t(&d, rng), rand_t(&d, rng), rand_t(&[3], rng)]
            },
            |_, v| Var::weighted_sum(&v[..3], &v[3]),
        ),
    ]
}

/// Worst finite-difference error of `c` over `seeds` draws, each reduced to
/// a scalar with a fixed random weighting.
pub fn op_grad_error(c: &OpCase, seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (c.build)(&mut rng);
        assert!(inputs.iter().all(|t| t.numel() <= 64), "{}", c.name);
        let op = c.op;
        let err = finite_diff_check(
            |tape, v| {
                let y = op(tape, v)?;
                let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let w = rand_t(y.shape(), &mut prng);
                Ok(y.mul(&tape.constant(w))?.sum())
            },
            &inputs,
            c.eps,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}
