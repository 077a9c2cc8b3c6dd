//! Shifted-window multi-head self-attention over channel-last `[H, W, C]`
//! feature maps.
//!
//! Windows are `w×w` tiles enumerated row-major, pixels inside a window
//! row-major. A shifted block cyclically rolls the map by `(-s, -s)` before
//! partitioning and rolls back afterwards; pixels that were not neighbours
//! before the roll get a `-100` logit bias so they cannot attend to each
//! other.

use std::sync::Arc;

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::layers::{join, Affine, ParamTree};
use crate::tensor::{Tensor, Var};

/// Logit added to pairs forbidden by the shift mask.
pub const MASK_SENTINEL: f32 = -100.0;

#[derive(Clone, Debug)]
pub struct AttentionParams<P> {
    /// `[3C, C]` projection to queries, keys and values, in that order,
    /// each split into `heads` contiguous chunks.
    pub qkv: Affine<P>,
    pub proj: Affine<P>,
    /// `[heads, (2w-1)²]`, indexed by relative offset.
    pub rel_bias_table: P,
}

impl AttentionParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(channels: usize, heads: usize, window: usize, rng: &mut R) -> Self {
        let span = 2 * window - 1;
        Self {
            qkv: Affine::init(channels, 3 * channels, rng),
            proj: Affine::init(channels, channels, rng),
            rel_bias_table: Tensor::zeros(&[heads, span * span]),
        }
    }
}

impl<P> ParamTree<P> for AttentionParams<P> {
    type Out<Q> = AttentionParams<Q>;

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> AttentionParams<Q> {
        AttentionParams {
            qkv: self.qkv.map(&join(prefix, "qkv"), f),
            proj: self.proj.map(&join(prefix, "proj"), f),
            rel_bias_table: f(&join(prefix, "rel_bias_table"), &self.rel_bias_table),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        f(&join(prefix, "rel_bias_table"), &mut self.rel_bias_table);
    }
}

/// Cyclic shift, `0 <= shift < window`. Alternates 0 and `window / 2`
/// between consecutive blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftConfig {
    pub shift: usize,
}

impl ShiftConfig {
    pub fn for_block(index: usize, window: usize) -> Self {
        Self {
            shift: if index % 2 == 1 { window / 2 } else { 0 },
        }
    }
}

fn hwc(x: &Var<'_>, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => dim_err(format!("{what}: expected [H, W, C], got {s:?}")),
    }
}

fn check_tiling(h: usize, w: usize, window: usize, what: &str) -> Result<()> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return dim_err(format!("{what}: {h}×{w} is not tiled by window {window}"));
    }
    Ok(())
}

/// `out[i, j] = x[(i + dy) mod H, (j + dx) mod W]`.
pub fn roll<'t>(x: &Var<'t>, dy: usize, dx: usize) -> Result<Var<'t>> {
    let (h, w, c) = hwc(x, "roll")?;
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..h {
        let si = (i + dy) % h;
        for j in 0..w {
            let base = (si * w + (j + dx) % w) * c;
            idx.extend((0..c).map(|k| (base + k) as u32));
        }
    }
    x.gather(Arc::new(idx), &[h, w, c])
}

fn partition_index(h: usize, w: usize, c: usize, window: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(h * w * c);
    for wy in 0..h / window {
        for wx in 0..w / window {
            for py in 0..window {
                for px in 0..window {
                    let base = ((wy * window + py) * w + wx * window + px) * c;
                    idx.extend((0..c).map(|k| (base + k) as u32));
                }
            }
        }
    }
    idx
}

/// `[H, W, C] → [nWin, w·w, C]`.
pub fn window_partition<'t>(x: &Var<'t>, window: usize) -> Result<Var<'t>> {
    let (h, w, c) = hwc(x, "window_partition")?;
    check_tiling(h, w, window, "window_partition")?;
    let n_win = (h / window) * (w / window);
    x.gather(
        Arc::new(partition_index(h, w, c, window)),
        &[n_win, window * window, c],
    )
}

/// Inverse of [`window_partition`].
pub fn window_reverse<'t>(win: &Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let (n_win, t, c) = match *win.shape() {
        [n, t, c] => (n, t, c),
        ref s => return dim_err(format!("window_reverse: expected [nWin, T, C], got {s:?}")),
    };
    let window = (t as f64).sqrt().round() as usize;
    if window * window != t {
        return dim_err(format!("window_reverse: {t} tokens is not a square window"));
    }
    check_tiling(h, w, window, "window_reverse")?;
    if n_win != (h / window) * (w / window) {
        return dim_err(format!("window_reverse: {n_win} windows do not tile {h}×{w}"));
    }
    let fwd = partition_index(h, w, c, window);
    let mut inv = vec![0u32; fwd.len()];
    for (pos, &src) in fwd.iter().enumerate() {
        inv[src as usize] = pos as u32;
    }
    win.gather(Arc::new(inv), &[h, w, c])
}

/// `[nWin, w·w, w·w]` additive mask: 0 where attention is allowed,
/// [`MASK_SENTINEL`] between pixels of different pre-shift regions.
pub fn shift_mask(h: usize, w: usize, window: usize, shift: usize) -> Result<Tensor> {
    check_tiling(h, w, window, "shift_mask")?;
    if shift >= window {
        return dim_err(format!("shift_mask: shift {shift} >= window {window}"));
    }
    let region = |i: usize, n: usize| -> usize {
        if shift == 0 || i < n - window {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let t = window * window;
    let n_win = (h / window) * (w / window);
    let mut data = vec![0.0f32; n_win * t * t];
    let mut win = 0;
    for wy in 0..h / window {
        for wx in 0..w / window {
            let labels: Vec<usize> = (0..t)
                .map(|p| {
                    let (py, px) = (wy * window + p / window, wx * window + p % window);
                    region(py, h) * 3 + region(px, w)
                })
                .collect();
            let block = &mut data[win * t * t..(win + 1) * t * t];
            for i in 0..t {
                for j in 0..t {
                    if labels[i] != labels[j] {
                        block[i * t + j] = MASK_SENTINEL;
                    }
                }
            }
            win += 1;
        }
    }
    Ok(Tensor::from_parts(vec![n_win, t, t], data))
}

/// Table slot of the offset between window positions `i` and `j`,
/// laid out as `[w·w, w·w]`.
pub fn relative_position_index(window: usize) -> Vec<u32> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / window, i % window);
        for j in 0..t {
            let (yj, xj) = (j / window, j % window);
            let dy = yi + window - 1 - yj;
            let dx = xi + window - 1 - xj;
            idx.push((dy * span + dx) as u32);
        }
    }
    idx
}

/// Split `[nWin, T, 3C]` into per-head `[nWin·heads, T, d]` for slot `which`.
fn head_split_index(n_win: usize, t: usize, c: usize, heads: usize, which: usize) -> Vec<u32> {
    let d = c / heads;
    let mut idx = Vec::with_capacity(n_win * t * c);
    for win in 0..n_win {
        for h in 0..heads {
            for tok in 0..t {
                let base = (win * t + tok) * 3 * c + which * c + h * d;
                idx.extend((0..d).map(|k| (base + k) as u32));
            }
        }
    }
    idx
}

fn head_merge_index(n_win: usize, t: usize, c: usize, heads: usize) -> Vec<u32> {
    let d = c / heads;
    let mut idx = Vec::with_capacity(n_win * t * c);
    for win in 0..n_win {
        for tok in 0..t {
            for h in 0..heads {
                let base = ((win * heads + h) * t + tok) * d;
                idx.extend((0..d).map(|k| (base + k) as u32));
            }
        }
    }
    idx
}

/// Shifted-window attention. Returns the output and, for probing, the
/// attention probabilities `[nWin·heads, T, T]`.
pub fn swsa_probe<'t>(
    x: &Var<'t>,
    p: &AttentionParams<Var<'t>>,
    heads: usize,
    window: usize,
    s: ShiftConfig,
) -> Result<(Var<'t>, Var<'t>)> {
    let (h, w, c) = hwc(x, "swsa")?;
    if heads == 0 || c % heads != 0 {
        return dim_err(format!("swsa: {c} channels not divisible by {heads} heads"));
    }
    check_tiling(h, w, window, "swsa")?;
    if s.shift >= window {
        return dim_err(format!("swsa: shift {} >= window {window}", s.shift));
    }
    let span = 2 * window - 1;
    if p.rel_bias_table.shape() != [heads, span * span] {
        return dim_err(format!(
            "swsa: bias table {:?}, expected [{heads}, {}]",
            p.rel_bias_table.shape(),
            span * span
        ));
    }
    let t = window * window;
    let n_win = (h / window) * (w / window);
    let d = c / heads;

    let shifted = if s.shift > 0 {
        roll(x, s.shift, s.shift)?
    } else {
        x.clone()
    };
    let tokens = window_partition(&shifted, window)?;
    let qkv = p.qkv.forward(&tokens)?;
    let split = |which| -> Result<Var<'t>> {
        qkv.gather(
            Arc::new(head_split_index(n_win, t, c, heads, which)),
            &[n_win * heads, t, d],
        )
    };
    let q = split(0)?.scale((d as f32).powf(-0.5));
    let k = split(1)?;
    let v = split(2)?;

    let rel = relative_position_index(window);
    let bias_idx: Vec<u32> = (0..heads)
        .flat_map(|hd| rel.iter().map(move |&r| (hd * span * span) as u32 + r))
        .collect();
    let bias = p.rel_bias_table.gather(Arc::new(bias_idx), &[heads, t, t])?;

    let mut logits = q
        .bmm_nt(&k)?
        .reshape(&[n_win, heads, t, t])?
        .add_broadcast(&bias)?;
    if s.shift > 0 {
        let mask = shift_mask(h, w, window, s.shift)?;
        let mut expanded = Vec::with_capacity(n_win * heads * t * t);
        for block in mask.data().chunks_exact(t * t) {
            for _ in 0..heads {
                expanded.extend_from_slice(block);
            }
        }
        let mask = x
            .tape()
            .constant(Tensor::from_parts(vec![n_win, heads, t, t], expanded));
        logits = logits.add(&mask)?;
    }
    let probs = logits.reshape(&[n_win * heads, t, t])?.softmax();
    let mixed = probs
        .bmm(&v)?
        .gather(Arc::new(head_merge_index(n_win, t, c, heads)), &[n_win, t, c])?;
    let out = p.proj.forward(&mixed)?;
    let merged = window_reverse(&out, h, w)?;
    let out = if s.shift > 0 {
        roll(&merged, h - s.shift, w - s.shift)?
    } else {
        merged
    };
    Ok((out, probs))
}

pub fn swsa<'t>(
    x: &Var<'t>,
    p: &AttentionParams<Var<'t>>,
    heads: usize,
    window: usize,
    s: ShiftConfig,
) -> Result<Var<'t>> {
    swsa_probe(x, p, heads, window, s).map(|(out, _)| out)
}
