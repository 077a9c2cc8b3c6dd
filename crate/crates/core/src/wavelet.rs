//! Orthonormal 2-D Haar analysis and synthesis on `[C, H, W]` maps.
//!
//! For each channel and each 2×2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! ll = (a + b + c + d) / 2    lh = (a + b - c - d) / 2   (row difference)
//! hl = (a - b + c - d) / 2    hh = (a - b - c + d) / 2
//! ```
//!
//! `lh` holds vertical detail and `hl` horizontal detail. The transform is
//! orthonormal, so it preserves energy and its adjoint is its inverse.

use crate::error::{dim_err, Result};
use crate::tensor::{Tensor, Var};

/// The four half-resolution outputs of one analysis step.
#[derive(Clone, Debug)]
pub struct SubBands<'t> {
    pub ll: Var<'t>,
    pub lh: Var<'t>,
    pub hl: Var<'t>,
    pub hh: Var<'t>,
}

/// Detail bands kept at one pyramid level.
#[derive(Clone, Debug)]
pub struct HighBands<'t> {
    pub lh: Var<'t>,
    pub hl: Var<'t>,
    pub hh: Var<'t>,
}

/// Detail triples from shallow to deep plus the deepest approximation.
#[derive(Clone, Debug)]
pub struct WaveletPyramid<'t> {
    pub levels: Vec<HighBands<'t>>,
    pub base_ll: Var<'t>,
}

fn analysis(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (h2, w2) = (h / 2, w / 2);
    let band = c * h2 * w2;
    let mut out = vec![0.0f32; 4 * band];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..h2 {
            let top = &plane[2 * i * w..][..w];
            let bot = &plane[(2 * i + 1) * w..][..w];
            for j in 0..w2 {
                let (a, b) = (top[2 * j], top[2 * j + 1]);
                let (cc, d) = (bot[2 * j], bot[2 * j + 1]);
                let o = (ch * h2 + i) * w2 + j;
                out[o] = 0.5 * ((a + b) + (cc + d));
                out[band + o] = 0.5 * ((a + b) - (cc + d));
                out[2 * band + o] = 0.5 * ((a - b) + (cc - d));
                out[3 * band + o] = 0.5 * ((a - b) - (cc - d));
            }
        }
    }
    out
}

fn synthesis(s: &[f32], c: usize, h2: usize, w2: usize) -> Vec<f32> {
    let (h, w) = (2 * h2, 2 * w2);
    let band = c * h2 * w2;
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let o = (ch * h2 + i) * w2 + j;
                let (ll, lh, hl, hh) = (s[o], s[band + o], s[2 * band + o], s[3 * band + o]);
                let base = ch * h * w;
                out[base + 2 * i * w + 2 * j] = 0.5 * ((ll + lh) + (hl + hh));
                out[base + 2 * i * w + 2 * j + 1] = 0.5 * ((ll + lh) - (hl + hh));
                out[base + (2 * i + 1) * w + 2 * j] = 0.5 * ((ll - lh) + (hl - hh));
                out[base + (2 * i + 1) * w + 2 * j + 1] = 0.5 * ((ll - lh) - (hl - hh));
            }
        }
    }
    out
}

fn chw(x: &Var<'_>, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => dim_err(format!("{what}: expected [C, H, W], got {s:?}")),
    }
}

/// One Haar analysis step. Both spatial extents must be even.
pub fn haar_decompose<'t>(x: &Var<'t>) -> Result<SubBands<'t>> {
    let (c, h, w) = chw(x, "haar_decompose")?;
    if h % 2 != 0 || w % 2 != 0 {
        return dim_err(format!("haar_decompose: odd extent in {:?}", x.shape()));
    }
    let (h2, w2) = (h / 2, w / 2);
    let out = Tensor::from_parts(vec![4, c, h2, w2], analysis(x.value().data(), c, h, w));
    let stacked = x.tape().op(out, &[x], 0, move |g, _| {
        vec![Some(Tensor::from_parts(vec![c, h, w], synthesis(g.data(), c, h2, w2)))]
    });
    let band = |i| -> Result<Var<'t>> { stacked.slice0(i, 1)?.reshape(&[c, h2, w2]) };
    Ok(SubBands {
        ll: band(0)?,
        lh: band(1)?,
        hl: band(2)?,
        hh: band(3)?,
    })
}

/// Exact inverse of [`haar_decompose`].
pub fn haar_reconstruct<'t>(s: &SubBands<'t>) -> Result<Var<'t>> {
    let (c, h2, w2) = chw(&s.ll, "haar_reconstruct")?;
    for b in [&s.lh, &s.hl, &s.hh] {
        if b.shape() != s.ll.shape() {
            return dim_err(format!(
                "haar_reconstruct: band {:?} vs ll {:?}",
                b.shape(),
                s.ll.shape()
            ));
        }
    }
    let parts: Vec<Var<'t>> = [&s.ll, &s.lh, &s.hl, &s.hh]
        .into_iter()
        .map(|b| b.reshape(&[1, c, h2, w2]))
        .collect::<Result<_>>()?;
    let stacked = Var::concat0(&parts.iter().collect::<Vec<_>>())?;
    let out = Tensor::from_parts(
        vec![c, 2 * h2, 2 * w2],
        synthesis(stacked.value().data(), c, h2, w2),
    );
    let (h, w) = (2 * h2, 2 * w2);
    Ok(stacked.tape().op(out, &[&stacked], 0, move |g, _| {
        vec![Some(Tensor::from_parts(vec![4, c, h2, w2], analysis(g.data(), c, h, w)))]
    }))
}

/// Recursive analysis of the approximation band, `depth` times.
pub fn pyramid_decompose<'t>(x: &Var<'t>, depth: usize) -> Result<WaveletPyramid<'t>> {
    let (_, h, w) = chw(x, "pyramid_decompose")?;
    let unit = 1usize << depth;
    if h % unit != 0 || w % unit != 0 {
        return dim_err(format!(
            "pyramid_decompose: {h}×{w} not divisible by 2^{depth}"
        ));
    }
    let mut levels = Vec::with_capacity(depth);
    let mut ll = x.clone();
    for _ in 0..depth {
        let s = haar_decompose(&ll)?;
        levels.push(HighBands {
            lh: s.lh,
            hl: s.hl,
            hh: s.hh,
        });
        ll = s.ll;
    }
    Ok(WaveletPyramid {
        levels,
        base_ll: ll,
    })
}

pub fn pyramid_reconstruct<'t>(p: &WaveletPyramid<'t>) -> Result<Var<'t>> {
    let mut ll = p.base_ll.clone();
    for level in p.levels.iter().rev() {
        ll = haar_reconstruct(&SubBands {
            ll,
            lh: level.lh.clone(),
            hl: level.hl.clone(),
            hh: level.hh.clone(),
        })?;
    }
    Ok(ll)
}

impl WaveletPyramid<'_> {
    /// Sum of squares over every stored band.
    pub fn energy(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| [&l.lh, &l.hl, &l.hh])
            .chain(std::iter::once(&self.base_ll))
            .map(|b| b.value().sq_norm())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn constant_image_is_pure_dc() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 4, 6], 0.7));
        let s = haar_decompose(&x).unwrap();
        assert_eq!(s.ll.shape(), &[2, 2, 3]);
        assert!(s.ll.value().data().iter().all(|&v| (v - 1.4).abs() < 1e-6));
        for b in [&s.lh, &s.hl, &s.hh] {
            assert!(b.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn odd_extent_is_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(haar_decompose(&x).is_err());
        assert!(pyramid_decompose(&tape.constant(Tensor::zeros(&[1, 4, 6])), 2).is_err());
    }

    #[test]
    fn reconstruct_rejects_mismatched_bands() {
        let tape = Tape::new();
        let s = SubBands {
            ll: tape.constant(Tensor::zeros(&[1, 2, 2])),
            lh: tape.constant(Tensor::zeros(&[1, 2, 2])),
            hl: tape.constant(Tensor::zeros(&[1, 2, 3])),
            hh: tape.constant(Tensor::zeros(&[1, 2, 2])),
        };
        assert!(haar_reconstruct(&s).is_err());
    }

    #[test]
    fn zero_depth_pyramid_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3, 5]));
        let p = pyramid_decompose(&x, 0).unwrap();
        assert!(p.levels.is_empty());
        assert!(p.base_ll.value().bit_eq(x.value()));
    }
}
