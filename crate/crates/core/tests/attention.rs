mod common;

use std::collections::HashSet;

use drnet::attention::{
    shift_mask, swsa, swsa_probe, window_partition, window_reverse,
    AttentionParams, ShiftConfig, MASK_SENTINEL,
};
use drnet::layers::bind;
use drnet::tensor::finite_diff_check;
use drnet::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::dense_attention;

fn params(c: usize, heads: usize, w: usize, seed: u64, random_bias: bool) -> AttentionParams<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = AttentionParams::init(c, heads, w, &mut rng);
    if random_bias {
        p.rel_bias_table = Tensor::uniform(p.rel_bias_table.shape(), -1.0, 1.0, &mut rng);
    }
    p
}

#[test]
fn partition_and_reverse_are_a_bijection_up_to_16() {
    let tape = Tape::new();
    for h in 1..=16 {
        for w in 1..=16 {
            for win in (1..=h.min(w)).filter(|k| h % k == 0 && w % k == 0) {
                let x = tape.constant(Tensor::from_fn(&[h, w, 2], |i| i as f32));
                let parts = window_partition(&x, win).unwrap();
                let seen: HashSet<u32> = parts.value().data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(seen.len(), h * w * 2);
                let back = window_reverse(&parts, h, w).unwrap();
                assert!(back.value().bit_eq(x.value()), "{h}×{w} / {win}");
            }
        }
    }
}

/// Pixels may attend iff both or neither coordinate wrapped around the
/// border during the roll, checked per axis.
fn wrap_oracle(h: usize, w: usize, win: usize, shift: usize) -> Vec<f32> {
    let t = win * win;
    let mut out = Vec::new();
    for wy in 0..h / win {
        for wx in 0..w / win {
            let wrapped = |p: usize| {
                let (ry, rx) = (wy * win + p / win, wx * win + p % win);
                (ry + shift >= h, rx + shift >= w)
            };
            for i in 0..t {
                for j in 0..t {
                    out.push(if wrapped(i) == wrapped(j) { 0.0 } else { MASK_SENTINEL });
                }
            }
        }
    }
    out
}

#[test]
fn shift_mask_matches_wrap_oracle_and_is_symmetric() {
    for (h, w, win, shift) in [(4, 4, 4, 2), (8, 8, 4, 2), (8, 12, 4, 1), (6, 6, 3, 1), (16, 8, 8, 4)] {
        let m = shift_mask(h, w, win, shift).unwrap();
        assert_eq!(m.data(), wrap_oracle(h, w, win, shift).as_slice(), "{h}×{w}/{win}/{shift}");
        let t = win * win;
        for block in m.data().chunks_exact(t * t) {
            for i in 0..t {
                for j in 0..t {
                    assert_eq!(block[i * t + j], block[j * t + i]);
                }
            }
        }
    }
    // single 4×4 window shifted by 2: four 2×2 quadrants of mutually allowed pixels
    let m = shift_mask(4, 4, 4, 2).unwrap();
    let blocked = m.data().iter().filter(|&&v| v == MASK_SENTINEL).count();
    assert_eq!(blocked, 16 * 16 - 4 * 4 * 4);
}

#[test]
fn unshifted_single_window_equals_dense_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (seed, (win, c, heads)) in [(4, 8, 2), (3, 6, 3), (2, 4, 1)].into_iter().enumerate() {
        let p = params(c, heads, win, seed as u64, true);
        let x = Tensor::uniform(&[win, win, c], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let bound = bind(&p, &tape, false);
        let y = swsa(&tape.constant(x.clone()), &bound, heads, win, ShiftConfig { shift: 0 }).unwrap();
        let want = dense_attention(&x, &p, heads, win);
        for (a, b) in y.value().data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn attention_rows_lie_on_the_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = params(8, 2, 4, 1, true);
    let tape = Tape::new();
    let bound = bind(&p, &tape, false);
    for shift in [0, 2] {
        let x = Tensor::uniform(&[8, 12, 8], -3.0, 3.0, &mut rng);
        let (_, probs) = swsa_probe(&tape.constant(x), &bound, 2, 4, ShiftConfig { shift }).unwrap();
        for row in probs.value().data().chunks_exact(16) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((s - 1.0).abs() <= 1e-6, "{s}");
        }
    }
}

#[test]
fn permuting_a_single_window_permutes_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (win, c) = (3, 4);
    let p = params(c, 2, win, 2, false);
    let tape = Tape::new();
    let bound = bind(&p, &tape, false);
    let x = Tensor::uniform(&[win, win, c], -1.0, 1.0, &mut rng);
    let mut perm: Vec<usize> = (0..win * win).collect();
    perm.shuffle(&mut rng);
    let permuted = Tensor::from_fn(&[win, win, c], |i| x.data()[perm[i / c] * c + i % c]);
    let s0 = ShiftConfig { shift: 0 };
    let y = swsa(&tape.constant(x), &bound, 2, win, s0).unwrap();
    let yp = swsa(&tape.constant(permuted), &bound, 2, win, s0).unwrap();
    for i in 0..win * win * c {
        let want = y.value().data()[perm[i / c] * c + i % c];
        assert!((yp.value().data()[i] - want).abs() <= 1e-6);
    }
}

#[test]
fn transposing_input_and_bias_table_transposes_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (win, c) = (4, 4);
    let p = params(c, 2, win, 3, true);
    let span = 2 * win - 1;
    let mut pt = p.clone();
    // offset (dy, dx) becomes (dx, dy)
    pt.rel_bias_table = Tensor::from_fn(&[2, span * span], |i| {
        let (h, r) = (i / (span * span), i % (span * span));
        p.rel_bias_table.data()[h * span * span + (r % span) * span + r / span]
    });
    let x = Tensor::uniform(&[win, win, c], -1.0, 1.0, &mut rng);
    let transpose = |t: &Tensor| {
        Tensor::from_fn(&[win, win, c], |i| {
            let (pix, k) = (i / c, i % c);
            t.data()[((pix % win) * win + pix / win) * c + k]
        })
    };
    let tape = Tape::new();
    let s0 = ShiftConfig { shift: 0 };
    let y = swsa(&tape.constant(x.clone()), &bind(&p, &tape, false), 2, win, s0).unwrap();
    let yt = swsa(&tape.constant(transpose(&x)), &bind(&pt, &tape, false), 2, win, s0).unwrap();
    assert!(yt.value().max_abs_diff(&transpose(y.value())).unwrap() <= 1e-6);
}

#[test]
fn shifted_output_depends_only_on_its_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (h, w, c, win, s) = (8, 8, 4, 4, 2);
    let p = params(c, 2, win, 5, true);
    let x = Tensor::uniform(&[h, w, c], -1.0, 1.0, &mut rng);
    for (i, j) in [(0, 0), (1, 6), (5, 2), (7, 7), (3, 3)] {
        let tape = Tape::new();
        let bound = bind(&p, &tape, false);
        let xv = tape.leaf(x.clone());
        let y = swsa(&xv, &bound, 2, win, ShiftConfig { shift: s }).unwrap();
        let pick = Tensor::from_fn(&[h, w, c], |k| if k / c == i * w + j { 1.0 } else { 0.0 });
        let loss = y.mul(&tape.constant(pick)).unwrap().sum();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.get(&xv).unwrap();

        let (ry, rx) = ((i + h - s) % h, (j + w - s) % w);
        let (wy, wx) = (ry / win, rx / win);
        let allowed: HashSet<(usize, usize)> = (0..win * win)
            .map(|q| ((wy * win + q / win + s) % h, (wx * win + q % win + s) % w))
            .collect();
        for pix in 0..h * w {
            let inside = allowed.contains(&(pix / w, pix % w));
            let mag: f32 = g.data()[pix * c..(pix + 1) * c].iter().map(|v| v.abs()).sum();
            if !inside {
                assert_eq!(mag, 0.0, "pixel {pix} outside window of ({i},{j})");
            }
        }
    }
}

#[test]
fn swsa_gradients_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = params(4, 2, 2, 6, true);
    for shift in [0, 1] {
        let inputs = [
            Tensor::uniform(&[4, 4, 4], -1.0, 1.0, &mut rng),
            p.qkv.weight.clone(),
            p.rel_bias_table.clone(),
            p.proj.bias.clone(),
        ];
        let probe = Tensor::uniform(&[4, 4, 4], -1.0, 1.0, &mut rng);
        let err = finite_diff_check(
            |tape, v| {
                let mut b = bind(&p, tape, false);
                b.qkv.weight = v[1].clone();
                b.rel_bias_table = v[2].clone();
                b.proj.bias = v[3].clone();
                let y = swsa(&v[0], &b, 2, 2, ShiftConfig { shift })?;
                Ok(y.mul(&tape.constant(probe.clone()))?.sum())
            },
            &inputs,
            1e-2,
        )
        .unwrap();
        assert!(err <= 1e-3, "shift {shift}: {err}");
    }
}
