//! Network skeleton shared by the trainable and the fused model.
//!
//! Data flow on a `[3, H, W]` input:
//!
//! ```text
//! shallow 3×3 conv ─┬─ stage-1 blocks ──────────────────────────┐
//!                   │    └─ [3×3 conv → Haar] ×3 (LL descends)   │
//!                   │         decoder level 4 blocks             │
//!                   │    [inverse Haar with skipped details      │
//!                   │     → 1×1 conv → decoder blocks] ×3        │
//!                   │                                 concat ────┘
//!                   │    1×1 fuse → post blocks → 3×3 conv
//!                   └──────────────── + ──→ 3×3 conv → + input
//! ```

use std::sync::Arc;

use rand::Rng;

use super::config::DRNetConfig;
use crate::attention::{swsa, AttentionParams, ShiftConfig};
use crate::drmlp::{drmlp_forward_train, tsm_weights, DrmlpParams, DrmlpShape, FusedMlp, TaskPrior};
use crate::error::{dim_err, Error, Result};
use crate::layers::{join, Conv, LayerNorm, ParamTree};
use crate::tensor::{Tensor, Var};
use crate::wavelet::{haar_decompose, haar_reconstruct, HighBands, SubBands};

/// Pre-norm transformer block: attention then MLP, each residual.
#[derive(Clone, Debug)]
pub struct Block<P, M> {
    pub norm1: LayerNorm<P>,
    pub attn: AttentionParams<P>,
    pub norm2: LayerNorm<P>,
    pub mlp: M,
}

impl<P, M: ParamTree<P>> ParamTree<P> for Block<P, M> {
    type Out<Q> = Block<Q, M::Out<Q>>;

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Out<Q> {
        Block {
            norm1: self.norm1.map(&join(prefix, "norm1"), f),
            attn: self.attn.map(&join(prefix, "attn"), f),
            norm2: self.norm2.map(&join(prefix, "norm2"), f),
            mlp: self.mlp.map(&join(prefix, "mlp"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

impl<P: Clone, M> Block<P, M> {
    fn map_mlp<M2>(&self, f: &mut impl FnMut(&M) -> Result<M2>) -> Result<Block<P, M2>> {
        Ok(Block {
            norm1: self.norm1.clone(),
            attn: self.attn.clone(),
            norm2: self.norm2.clone(),
            mlp: f(&self.mlp)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Network<P, M> {
    pub shallow: Conv<P>,
    pub stage1: Vec<Block<P, M>>,
    /// One 3×3 conv per encoder level, shallow to deep.
    pub encoder: Vec<Conv<P>>,
    /// Decoder block chains for levels 2, 3 and 4.
    pub decoder: Vec<Vec<Block<P, M>>>,
    /// 1×1 convs after each inverse Haar step, indexed by the level they
    /// produce (0 projects back to the base width).
    pub decoder_proj: Vec<Conv<P>>,
    pub fuse: Conv<P>,
    pub post: Vec<Block<P, M>>,
    pub post_conv: Conv<P>,
    pub out_conv: Conv<P>,
}

impl<P, M: ParamTree<P>> ParamTree<P> for Network<P, M> {
    type Out<Q> = Network<Q, M::Out<Q>>;

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Out<Q> {
        Network {
            shallow: self.shallow.map(&join(prefix, "shallow"), f),
            stage1: self.stage1.map(&join(prefix, "stage1"), f),
            encoder: self.encoder.map(&join(prefix, "encoder"), f),
            decoder: self.decoder.map(&join(prefix, "decoder"), f),
            decoder_proj: self.decoder_proj.map(&join(prefix, "decoder_proj"), f),
            fuse: self.fuse.map(&join(prefix, "fuse"), f),
            post: self.post.map(&join(prefix, "post"), f),
            post_conv: self.post_conv.map(&join(prefix, "post_conv"), f),
            out_conv: self.out_conv.map(&join(prefix, "out_conv"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.shallow.visit_mut(&join(prefix, "shallow"), f);
        self.stage1.visit_mut(&join(prefix, "stage1"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.decoder_proj.visit_mut(&join(prefix, "decoder_proj"), f);
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
        self.post.visit_mut(&join(prefix, "post"), f);
        self.post_conv.visit_mut(&join(prefix, "post_conv"), f);
        self.out_conv.visit_mut(&join(prefix, "out_conv"), f);
    }
}

impl<P: Clone, M> Network<P, M> {
    /// Same skeleton with every MLP replaced; all other leaves are cloned.
    pub fn map_mlp<M2>(&self, mut f: impl FnMut(&M) -> Result<M2>) -> Result<Network<P, M2>> {
        let chain = |blocks: &[Block<P, M>], f: &mut dyn FnMut(&M) -> Result<M2>| {
            blocks
                .iter()
                .map(|b| b.map_mlp(&mut |m: &M| f(m)))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Network {
            shallow: self.shallow.clone(),
            stage1: chain(&self.stage1, &mut f)?,
            encoder: self.encoder.clone(),
            decoder: self
                .decoder
                .iter()
                .map(|d| chain(d, &mut f))
                .collect::<Result<_>>()?,
            decoder_proj: self.decoder_proj.clone(),
            fuse: self.fuse.clone(),
            post: chain(&self.post, &mut f)?,
            post_conv: self.post_conv.clone(),
            out_conv: self.out_conv.clone(),
        })
    }

    pub fn mlps(&self) -> impl Iterator<Item = &M> {
        self.stage1
            .iter()
            .chain(self.decoder.iter().flatten())
            .chain(self.post.iter())
            .map(|b| &b.mlp)
    }
}

impl Network<Tensor, DrmlpParams<Tensor>> {
    pub fn init<R: Rng + ?Sized>(cfg: &DRNetConfig, rng: &mut R) -> Self {
        let (c, d) = (cfg.base_channels, cfg.deep_channels);
        let chain = |n: usize, width: usize, heads: usize, rng: &mut R| -> Vec<_> {
            (0..n)
                .map(|_| Block {
                    norm1: LayerNorm::new(width),
                    attn: AttentionParams::init(width, heads, cfg.window, rng),
                    norm2: LayerNorm::new(width),
                    mlp: DrmlpParams::init(
                        DrmlpShape {
                            channels: width,
                            expansion: cfg.expansion,
                            n1: cfg.bank_sizes[0],
                            n2: cfg.bank_sizes[1],
                            num_tasks: cfg.num_tasks,
                            zero_tsm_logits: cfg.zero_tsm_logits,
                        },
                        rng,
                    ),
                })
                .collect()
        };
        let shallow = Conv::init(cfg.in_channels, c, 3, rng);
        let stage1 = chain(cfg.blocks[0], c, cfg.heads[0], rng);
        let encoder = vec![
            Conv::init(c, d, 3, rng),
            Conv::init(d, d, 3, rng),
            Conv::init(d, d, 3, rng),
        ];
        let decoder = (1..4)
            .map(|lvl| chain(cfg.blocks[lvl], d, cfg.heads[lvl], rng))
            .collect();
        let decoder_proj = vec![
            Conv::init(d, c, 1, rng),
            Conv::init(d, d, 1, rng),
            Conv::init(d, d, 1, rng),
        ];
        let fuse = Conv::init(2 * c, c, 1, rng);
        let post = chain(1 + cfg.refinement_blocks, c, cfg.heads[0], rng);
        let post_conv = Conv::init(c, c, 3, rng);
        let out_conv = Conv::init(c, cfg.in_channels, 3, rng);
        Self {
            shallow,
            stage1,
            encoder,
            decoder,
            decoder_proj,
            fuse,
            post,
            post_conv,
            out_conv,
        }
    }
}

/// How a block evaluates its MLP on a bound tape.
pub trait MlpApply<'t> {
    fn apply(&self, x: &Var<'t>, prior: Option<&TaskPrior>) -> Result<Var<'t>>;
}

impl<'t> MlpApply<'t> for DrmlpParams<Var<'t>> {
    fn apply(&self, x: &Var<'t>, prior: Option<&TaskPrior>) -> Result<Var<'t>> {
        let prior = prior.ok_or_else(|| {
            Error::Contract("the multi-branch network needs a task prior".into())
        })?;
        let (w1, w2) = tsm_weights(x.tape(), prior, &self.tsm)?;
        drmlp_forward_train(x, self, &w1, &w2)
    }
}

impl<'t> MlpApply<'t> for FusedMlp<Var<'t>> {
    fn apply(&self, x: &Var<'t>, _prior: Option<&TaskPrior>) -> Result<Var<'t>> {
        self.forward(x)
    }
}

fn transpose_index(rows: usize, cols: usize) -> Arc<Vec<u32>> {
    // out[j, i] = in[i, j]
    let mut idx = Vec::with_capacity(rows * cols);
    for j in 0..cols {
        for i in 0..rows {
            idx.push((i * cols + j) as u32);
        }
    }
    Arc::new(idx)
}

fn to_hwc<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let &[c, h, w] = x.shape() else {
        return dim_err(format!("expected [C, H, W], got {:?}", x.shape()));
    };
    x.gather(transpose_index(c, h * w), &[h, w, c])
}

fn to_chw<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let &[h, w, c] = x.shape() else {
        return dim_err(format!("expected [H, W, C], got {:?}", x.shape()));
    };
    x.gather(transpose_index(h * w, c), &[c, h, w])
}

fn block_forward<'t, M: MlpApply<'t>>(
    b: &Block<Var<'t>, M>,
    x: &Var<'t>,
    heads: usize,
    window: usize,
    shift: ShiftConfig,
    prior: Option<&TaskPrior>,
) -> Result<Var<'t>> {
    let attended = swsa(&b.norm1.forward(x)?, &b.attn, heads, window, shift)?;
    let x = x.add(&attended)?;
    let mixed = b.mlp.apply(&b.norm2.forward(&x)?, prior)?;
    x.add(&mixed)
}

/// Runs a block chain on a `[C, H, W]` map.
fn stage_forward<'t, M: MlpApply<'t>>(
    blocks: &[Block<Var<'t>, M>],
    x: &Var<'t>,
    heads: usize,
    window: usize,
    prior: Option<&TaskPrior>,
) -> Result<Var<'t>> {
    if blocks.is_empty() {
        return Ok(x.clone());
    }
    let mut t = to_hwc(x)?;
    for (i, b) in blocks.iter().enumerate() {
        t = block_forward(b, &t, heads, window, ShiftConfig::for_block(i, window), prior)?;
    }
    to_chw(&t)
}

/// Forward pass on an input whose extents are multiples of
/// [`DRNetConfig::size_multiple`].
pub fn network_forward<'t, M: MlpApply<'t>>(
    net: &Network<Var<'t>, M>,
    cfg: &DRNetConfig,
    x: &Var<'t>,
    prior: Option<&TaskPrior>,
) -> Result<Var<'t>> {
    let &[ch, h, w] = x.shape() else {
        return dim_err(format!("network input must be [C, H, W], got {:?}", x.shape()));
    };
    let unit = cfg.size_multiple();
    if ch != cfg.in_channels || h % unit != 0 || w % unit != 0 {
        return dim_err(format!(
            "network input {:?} needs {} channels and extents divisible by {unit}",
            x.shape(),
            cfg.in_channels
        ));
    }
    let win = cfg.window;
    let shallow = net.shallow.forward(x)?;
    let first = stage_forward(&net.stage1, &shallow, cfg.heads[0], win, prior)?;

    let mut skips: Vec<HighBands<'t>> = Vec::with_capacity(3);
    let mut low = first.clone();
    for conv in &net.encoder {
        let bands = haar_decompose(&conv.forward(&low)?)?;
        skips.push(HighBands {
            lh: bands.lh,
            hl: bands.hl,
            hh: bands.hh,
        });
        low = bands.ll;
    }

    let mut dec = stage_forward(&net.decoder[2], &low, cfg.heads[3], win, prior)?;
    for level in (0..3).rev() {
        let skip = &skips[level];
        let up = haar_reconstruct(&SubBands {
            ll: dec,
            lh: skip.lh.clone(),
            hl: skip.hl.clone(),
            hh: skip.hh.clone(),
        })?;
        dec = net.decoder_proj[level].forward(&up)?;
        if level > 0 {
            dec = stage_forward(&net.decoder[level - 1], &dec, cfg.heads[level], win, prior)?;
        }
    }

    let deep = Var::concat0(&[&dec, &first])?;
    let fused = net.fuse.forward(&deep)?;
    let refined = stage_forward(&net.post, &fused, cfg.heads[0], win, prior)?;
    let refined = net.post_conv.forward(&refined)?.add(&shallow)?;
    net.out_conv.forward(&refined)?.add(x)
}

/// Reflect-pads a `[C, H, W]` map to `[C, H', W']` (mirror without
/// repeating the edge). The pad on each axis must be smaller than its extent.
pub fn pad_reflect<'t>(x: &Var<'t>, to_h: usize, to_w: usize) -> Result<Var<'t>> {
    let &[c, h, w] = x.shape() else {
        return dim_err(format!("pad_reflect: expected [C, H, W], got {:?}", x.shape()));
    };
    if to_h < h || to_w < w || to_h - h >= h.max(1) || to_w - w >= w.max(1) {
        return dim_err(format!(
            "extent overflow: cannot reflect-pad {h}×{w} to {to_h}×{to_w}"
        ));
    }
    let mirror = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let mut idx = Vec::with_capacity(c * to_h * to_w);
    for ch in 0..c {
        for i in 0..to_h {
            let si = mirror(i, h);
            for j in 0..to_w {
                idx.push(((ch * h + si) * w + mirror(j, w)) as u32);
            }
        }
    }
    x.gather(Arc::new(idx), &[c, to_h, to_w])
}

/// Top-left `[C, h, w]` window of a `[C, H, W]` map.
pub fn crop<'t>(x: &Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let &[c, full_h, full_w] = x.shape() else {
        return dim_err(format!("crop: expected [C, H, W], got {:?}", x.shape()));
    };
    if h > full_h || w > full_w {
        return dim_err(format!("crop: {h}×{w} exceeds {full_h}×{full_w}"));
    }
    if h == full_h && w == full_w {
        return Ok(x.clone());
    }
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                idx.push(((ch * full_h + i) * full_w + j) as u32);
            }
        }
    }
    x.gather(Arc::new(idx), &[c, h, w])
}

/// Pads to valid extents, runs the network, crops back.
pub fn padded_forward<'t, M: MlpApply<'t>>(
    net: &Network<Var<'t>, M>,
    cfg: &DRNetConfig,
    x: &Var<'t>,
    prior: Option<&TaskPrior>,
) -> Result<Var<'t>> {
    let &[_, h, w] = x.shape() else {
        return dim_err(format!("expected [C, H, W], got {:?}", x.shape()));
    };
    let unit = cfg.size_multiple();
    let (ph, pw) = (h.div_ceil(unit) * unit, w.div_ceil(unit) * unit);
    if (ph, pw) == (h, w) {
        return network_forward(net, cfg, x, prior);
    }
    let padded = pad_reflect(x, ph, pw)?;
    crop(&network_forward(net, cfg, &padded, prior)?, h, w)
}
