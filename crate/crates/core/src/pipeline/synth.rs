//! Procedural clean scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// SplitMix64 finalizer folded over `parts`, for independent per-item seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts.iter().chain(std::iter::once(&0x9E37_79B9_7F4A_7C15)) {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Linear two-color gradient, then rectangles, disks and one checkerboard
/// patch painted over it. Output is `[3, h, w]` in `[0, 1]`.
pub fn synth_clean(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = h * w;
    let mut img = vec![0.0f32; 3 * plane];
    let paint = |img: &mut [f32], i: usize, j: usize, c: [f32; 3], alpha: f32| {
        for ch in 0..3 {
            let v = &mut img[ch * plane + i * w + j];
            *v = (1.0 - alpha) * *v + alpha * c[ch];
        }
    };

    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let theta: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = theta.sin_cos();
    let span = (h as f32).hypot(w as f32).max(1.0);
    for i in 0..h {
        for j in 0..w {
            let t = (0.5 + (i as f32 * dy + j as f32 * dx) / span).clamp(0.0, 1.0);
            let c = [0, 1, 2].map(|k| c0[k] + t * (c1[k] - c0[k]));
            paint(&mut img, i, j, c, 1.0);
        }
    }

    for _ in 0..rng.random_range(2..=6) {
        let (i0, j0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (rh, rw) = (rng.random_range(1..=h.div_ceil(2)), rng.random_range(1..=w.div_ceil(2)));
        let c = color(&mut rng);
        for i in i0..(i0 + rh).min(h) {
            for j in j0..(j0 + rw).min(w) {
                paint(&mut img, i, j, c, 1.0);
            }
        }
    }

    for _ in 0..rng.random_range(1..=4) {
        let (ci, cj) = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
        let r = rng.random_range(1.0..(h.min(w) as f32 / 3.0).max(1.5));
        let c = color(&mut rng);
        for i in 0..h {
            for j in 0..w {
                // one pixel of antialiasing at the rim
                let d = (i as f32 + 0.5 - ci).hypot(j as f32 + 0.5 - cj);
                let alpha = (r + 0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    paint(&mut img, i, j, c, alpha);
                }
            }
        }
    }

    let cell = rng.random_range(2..=6usize);
    let (i0, j0) = (rng.random_range(0..h), rng.random_range(0..w));
    let (ph, pw) = (rng.random_range(1..=h.div_ceil(2)), rng.random_range(1..=w.div_ceil(2)));
    let (a, b) = (color(&mut rng), color(&mut rng));
    for i in i0..(i0 + ph).min(h) {
        for j in j0..(j0 + pw).min(w) {
            let c = if ((i - i0) / cell + (j - j0) / cell) % 2 == 0 { a } else { b };
            paint(&mut img, i, j, c, 1.0);
        }
    }

    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(&[3, h, w], img).expect("positive extents")
}
