//! Parameter containers shared by every block.
//!
//! Each container is generic over its leaf type `P`: `Tensor` for stored
//! weights, `Var<'t>` once bound to a tape. [`ParamTree`] walks the leaves
//! in a fixed order under dotted names, which is what binding, optimizers
//! and checkpoints all rely on.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var, LN_EPS};

pub trait ParamTree<P> {
    type Out<Q>;

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Out<Q>;

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Read-only walk over every leaf.
pub fn visit<P, T: ParamTree<P>>(tree: &T, f: &mut dyn FnMut(&str, &P)) {
    let _ = tree.map(
        "",
        &mut |name, p| {
            f(name, p);
        },
    );
}

pub fn param_count<T: ParamTree<Tensor>>(tree: &T) -> usize {
    let mut n = 0;
    visit(tree, &mut |_, t: &Tensor| n += t.numel());
    n
}

/// Binds stored tensors to a tape, as leaves when `trainable`.
pub fn bind<'t, T: ParamTree<Tensor>>(tree: &T, tape: &'t Tape, trainable: bool) -> T::Out<Var<'t>> {
    tree.map("", &mut |_, t| tape.var(t.clone(), trainable))
}

/// Affine map `y = W·x + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Affine<P> {
    pub weight: P,
    pub bias: P,
}

impl Affine<Tensor> {
    /// Uniform in `±1/sqrt(fan_in)` for both weight and bias.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        Self {
            weight: Tensor::uniform(&[d_out, d_in], -bound, bound, rng),
            bias: Tensor::uniform(&[d_out], -bound, bound, rng),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_out, d_in]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl<'t> Affine<Var<'t>> {
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        x.linear(&self.weight, Some(&self.bias))
    }
}

impl<P> ParamTree<P> for Affine<P> {
    type Out<Q> = Affine<Q>;

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Affine<Q> {
        Affine {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Square "same" convolution, kernel `[out, in, s, s]`.
#[derive(Clone, Debug)]
pub struct Conv<P> {
    pub kernel: P,
    pub bias: P,
}

impl Conv<Tensor> {
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, size: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((c_in * size * size) as f32).sqrt();
        Self {
            kernel: Tensor::uniform(&[c_out, c_in, size, size], -bound, bound, rng),
            bias: Tensor::uniform(&[c_out], -bound, bound, rng),
        }
    }
}

impl<'t> Conv<Var<'t>> {
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        x.conv2d(&self.kernel, Some(&self.bias))
    }
}

impl<P> ParamTree<P> for Conv<P> {
    type Out<Q> = Conv<Q>;

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Conv<Q> {
        Conv {
            kernel: f(&join(prefix, "kernel"), &self.kernel),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "kernel"), &mut self.kernel);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<P> {
    pub gamma: P,
    pub beta: P,
}

impl LayerNorm<Tensor> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        }
    }
}

impl<'t> LayerNorm<Var<'t>> {
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }
}

impl<P> ParamTree<P> for LayerNorm<P> {
    type Out<Q> = LayerNorm<Q>;

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> LayerNorm<Q> {
        LayerNorm {
            gamma: f(&join(prefix, "gamma"), &self.gamma),
            beta: f(&join(prefix, "beta"), &self.beta),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

impl<P, T: ParamTree<P>> ParamTree<P> for Vec<T> {
    type Out<Q> = Vec<T::Out<Q>>;

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Vec<T::Out<Q>> {
        self.iter()
            .enumerate()
            .map(|(i, item)| item.map(&join(prefix, &i.to_string()), f))
            .collect()
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// An absent subtree has no leaves.
impl<P, T: ParamTree<P>> ParamTree<P> for Option<T> {
    type Out<Q> = Option<T::Out<Q>>;

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Option<T::Out<Q>> {
        self.as_ref().map(|t| t.map(prefix, f))
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        if let Some(t) = self {
            t.visit_mut(prefix, f);
        }
    }
}
