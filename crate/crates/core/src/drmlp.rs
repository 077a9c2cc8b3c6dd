//! Task-modulated two-stage MLP with parallel linear banks.
//!
//! During training each stage is a bank of `N` affine branches whose outputs
//! are mixed by convex weights. The weights come from a small modulator fed
//! with a one-hot task prior, so they depend only on the task and never on
//! the input. That makes every bank collapse into one affine map once a task
//! is chosen:
//!
//! ```text
//! Σ_j w_j·(W_j·x + b_j) = (Σ_j w_j·W_j)·x + Σ_j w_j·b_j
//! ```
//!
//! [`drmlp_fuse`] performs that collapse once per session; the resulting
//! [`FusedMlp`] costs exactly what a plain two-layer MLP costs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::layers::{join, Affine, ParamTree};
use crate::tensor::{Tape, Tensor, Var};

/// Restoration tasks with their fixed prior slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Denoise,
    Derain,
    Dehaze,
    Deblur,
    Enhance,
    Blind,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Denoise,
        Task::Derain,
        Task::Dehaze,
        Task::Deblur,
        Task::Enhance,
        Task::Blind,
    ];

    /// The five degradation-specific tasks.
    pub const SPECIFIC: [Task; 5] = [
        Task::Denoise,
        Task::Derain,
        Task::Dehaze,
        Task::Deblur,
        Task::Enhance,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Derain => "derain",
            Task::Dehaze => "dehaze",
            Task::Deblur => "deblur",
            Task::Enhance => "enhance",
            Task::Blind => "blind",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

/// One-hot task embedding over `K` slots.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPrior {
    z: Tensor,
    task_name: String,
}

impl TaskPrior {
    pub fn new(task: Task, num_tasks: usize) -> Result<Self> {
        Self::from_slot(task.index(), num_tasks, task.name())
    }

    pub fn from_slot(slot: usize, num_tasks: usize, name: &str) -> Result<Self> {
        if slot >= num_tasks {
            return Err(Error::Contract(format!(
                "task slot {slot} does not fit {num_tasks} prior slots"
            )));
        }
        let z = Tensor::from_fn(&[num_tasks], |i| if i == slot { 1.0 } else { 0.0 });
        Ok(Self {
            z,
            task_name: name.to_string(),
        })
    }

    /// Validates an externally supplied vector.
    pub fn from_vector(z: Tensor, name: &str) -> Result<Self> {
        let ones = z.data().iter().filter(|&&v| v == 1.0).count();
        let zeros = z.data().iter().filter(|&&v| v == 0.0).count();
        if z.rank() != 1 || ones != 1 || ones + zeros != z.numel() {
            return Err(Error::Contract(format!("prior {z:?} is not one-hot")));
        }
        Ok(Self {
            z,
            task_name: name.to_string(),
        })
    }

    pub fn z(&self) -> &Tensor {
        &self.z
    }

    pub fn task_name(&self) -> &str {
        &self.task_name
    }

    pub fn slot(&self) -> usize {
        self.z.data().iter().position(|&v| v == 1.0).unwrap()
    }

    pub fn num_tasks(&self) -> usize {
        self.z.numel()
    }
}

/// `N` parallel affine maps of identical shape.
#[derive(Clone, Debug)]
pub struct LinearBank<P> {
    pub branches: Vec<Affine<P>>,
}

impl LinearBank<Tensor> {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, n: usize, rng: &mut R) -> Self {
        Self {
            branches: (0..n).map(|_| Affine::init(d_in, d_out, rng)).collect(),
        }
    }
}

impl<P> LinearBank<P> {
    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }
}

impl<P> ParamTree<P> for LinearBank<P> {
    type Out<Q> = LinearBank<Q>;

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> LinearBank<Q> {
        LinearBank {
            branches: self.branches.map(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.branches.visit_mut(prefix, f);
    }
}

/// Two stacked affine maps from the prior to one bank's logits.
#[derive(Clone, Debug)]
pub struct TsmHead<P> {
    pub hidden: Affine<P>,
    pub logits: Affine<P>,
}

impl<P> ParamTree<P> for TsmHead<P> {
    type Out<Q> = TsmHead<Q>;

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> TsmHead<Q> {
        TsmHead {
            hidden: self.hidden.map(&join(prefix, "hidden"), f),
            logits: self.logits.map(&join(prefix, "logits"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.logits.visit_mut(&join(prefix, "logits"), f);
    }
}

/// Task-specific modulator: one head per bank, hidden width `4·K`.
/// A single-branch bank has no head; its weight is the constant 1.
#[derive(Clone, Debug)]
pub struct TsmParams<P> {
    pub num_tasks: usize,
    pub bank1: Option<TsmHead<P>>,
    pub bank2: Option<TsmHead<P>>,
}

impl TsmParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(
        num_tasks: usize,
        n1: usize,
        n2: usize,
        zero_logits: bool,
        rng: &mut R,
    ) -> Self {
        let hidden = 4 * num_tasks;
        let mut head = |n: usize| {
            (n > 1).then(|| TsmHead {
                hidden: Affine::init(num_tasks, hidden, rng),
                logits: if zero_logits {
                    Affine::zeros(hidden, n)
                } else {
                    Affine::init(hidden, n, rng)
                },
            })
        };
        Self {
            num_tasks,
            bank1: head(n1),
            bank2: head(n2),
        }
    }

    /// Branch weights for a prior, evaluated without recording.
    pub fn weights(&self, prior: &TaskPrior) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let bound = crate::layers::bind(self, &tape, false);
        let (w1, w2) = tsm_weights(&tape, prior, &bound)?;
        Ok((w1.value().clone(), w2.value().clone()))
    }
}

impl<P> ParamTree<P> for TsmParams<P> {
    type Out<Q> = TsmParams<Q>;

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> TsmParams<Q> {
        TsmParams {
            num_tasks: self.num_tasks,
            bank1: ParamTree::map(&self.bank1, &join(prefix, "bank1"), f),
            bank2: ParamTree::map(&self.bank2, &join(prefix, "bank2"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.bank1.visit_mut(&join(prefix, "bank1"), f);
        self.bank2.visit_mut(&join(prefix, "bank2"), f);
    }
}

#[derive(Clone, Debug)]
pub struct DrmlpParams<P> {
    /// `C → r·C`
    pub bank1: LinearBank<P>,
    /// `r·C → C`
    pub bank2: LinearBank<P>,
    pub tsm: TsmParams<P>,
}

/// Sizes needed to build a [`DrmlpParams`].
#[derive(Clone, Copy, Debug)]
pub struct DrmlpShape {
    pub channels: usize,
    pub expansion: usize,
    pub n1: usize,
    pub n2: usize,
    pub num_tasks: usize,
    pub zero_tsm_logits: bool,
}

impl DrmlpParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(s: DrmlpShape, rng: &mut R) -> Self {
        let hidden = s.channels * s.expansion;
        Self {
            bank1: LinearBank::init(s.channels, hidden, s.n1, rng),
            bank2: LinearBank::init(hidden, s.channels, s.n2, rng),
            tsm: TsmParams::init(s.num_tasks, s.n1, s.n2, s.zero_tsm_logits, rng),
        }
    }
}

impl<P> ParamTree<P> for DrmlpParams<P> {
    type Out<Q> = DrmlpParams<Q>;

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> DrmlpParams<Q> {
        DrmlpParams {
            bank1: self.bank1.map(&join(prefix, "bank1"), f),
            bank2: self.bank2.map(&join(prefix, "bank2"), f),
            tsm: self.tsm.map(&join(prefix, "tsm"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.bank1.visit_mut(&join(prefix, "bank1"), f);
        self.bank2.visit_mut(&join(prefix, "bank2"), f);
        self.tsm.visit_mut(&join(prefix, "tsm"), f);
    }
}

pub type FusedAffine = Affine<Tensor>;

/// Static two-layer MLP left after fusing both banks.
#[derive(Clone, Debug)]
pub struct FusedMlp<P> {
    pub fc1: Affine<P>,
    pub fc2: Affine<P>,
}

impl<'t> FusedMlp<Var<'t>> {
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

impl<P> ParamTree<P> for FusedMlp<P> {
    type Out<Q> = FusedMlp<Q>;

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> FusedMlp<Q> {
        FusedMlp {
            fc1: self.fc1.map(&join(prefix, "fc1"), f),
            fc2: self.fc2.map(&join(prefix, "fc2"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

fn head_weights<'t>(z: &Var<'t>, head: &Option<TsmHead<Var<'t>>>) -> Result<Var<'t>> {
    match head {
        Some(h) => Ok(h.logits.forward(&h.hidden.forward(z)?)?.softmax()),
        None => Ok(z.tape().constant(Tensor::ones(&[1]))),
    }
}

/// `softmax(logits(hidden(z)))` for each bank.
pub fn tsm_weights<'t>(
    tape: &'t Tape,
    prior: &TaskPrior,
    tsm: &TsmParams<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    let k = tsm.num_tasks;
    if prior.num_tasks() != k {
        return dim_err(format!(
            "prior has {} slots, modulator expects {k}",
            prior.num_tasks()
        ));
    }
    let z = tape.constant(prior.z().clone());
    Ok((head_weights(&z, &tsm.bank1)?, head_weights(&z, &tsm.bank2)?))
}

fn check_simplex(w: &Var<'_>, n: usize, which: &str) -> Result<()> {
    if w.shape() != [n] {
        return dim_err(format!("{which}: {:?} weights for {n} branches", w.shape()));
    }
    let data = w.value().data();
    let total: f64 = data.iter().map(|&v| v as f64).sum();
    if data.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > 1e-4 {
        return Err(Error::Contract(format!("{which}: weights {data:?} are not on the simplex")));
    }
    Ok(())
}

fn bank_forward<'t>(x: &Var<'t>, bank: &LinearBank<Var<'t>>, w: &Var<'t>) -> Result<Var<'t>> {
    let outs = bank
        .branches
        .iter()
        .map(|b| b.forward(x))
        .collect::<Result<Vec<_>>>()?;
    // a lone branch with unit weight needs no mixing pass
    if outs.len() == 1 && w.value().data() == [1.0] && !w.requires_grad() {
        return Ok(outs.into_iter().next().unwrap());
    }
    Var::weighted_sum(&outs, w)
}

/// Multi-branch path: `Σ_k w2_k·L2_k(GELU(Σ_j w1_j·L1_j(x)))`.
pub fn drmlp_forward_train<'t>(
    x: &Var<'t>,
    p: &DrmlpParams<Var<'t>>,
    w1: &Var<'t>,
    w2: &Var<'t>,
) -> Result<Var<'t>> {
    check_simplex(w1, p.bank1.len(), "bank1")?;
    check_simplex(w2, p.bank2.len(), "bank2")?;
    let hidden = bank_forward(x, &p.bank1, w1)?.gelu();
    bank_forward(&hidden, &p.bank2, w2)
}

/// `W_new = Σ_j w_j·W_j`, `b_new = Σ_j w_j·b_j`.
pub fn fuse_bank(bank: &LinearBank<Tensor>, w: &[f32]) -> Result<FusedAffine> {
    if w.len() != bank.len() || bank.is_empty() {
        return dim_err(format!(
            "fuse_bank: {} weights for {} branches",
            w.len(),
            bank.len()
        ));
    }
    let first = &bank.branches[0];
    for b in &bank.branches {
        first.weight.expect_same_shape(&b.weight)?;
        first.bias.expect_same_shape(&b.bias)?;
    }
    let mix = |pick: fn(&Affine<Tensor>) -> &Tensor| -> Tensor {
        let mut acc = vec![0.0f64; pick(first).numel()];
        for (b, &wj) in bank.branches.iter().zip(w) {
            for (a, &v) in acc.iter_mut().zip(pick(b).data()) {
                *a += wj as f64 * v as f64;
            }
        }
        Tensor::from_parts(
            pick(first).shape().to_vec(),
            acc.into_iter().map(|v| v as f32).collect(),
        )
    };
    Ok(Affine {
        weight: mix(|a| &a.weight),
        bias: mix(|a| &a.bias),
    })
}

/// Session-time collapse of both banks for one prior.
pub fn drmlp_fuse(p: &DrmlpParams<Tensor>, prior: &TaskPrior) -> Result<FusedMlp<Tensor>> {
    let (w1, w2) = p.tsm.weights(prior)?;
    Ok(FusedMlp {
        fc1: fuse_bank(&p.bank1, w1.data())?,
        fc2: fuse_bank(&p.bank2, w2.data())?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bank {
    First,
    Second,
}

impl FusedMlp<Tensor> {
    pub fn bank(&self, bank: Bank) -> &FusedAffine {
        match bank {
            Bank::First => &self.fc1,
            Bank::Second => &self.fc2,
        }
    }
}

/// Pairwise cosine similarities; `None` marks a pair with a zero-norm side.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub entries: Vec<Vec<Option<f64>>>,
}

impl SimilarityMatrix {
    pub fn from_vectors(labels: Vec<String>, vectors: &[Vec<f32>]) -> Self {
        let norms: Vec<f64> = vectors
            .iter()
            .map(|v| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt())
            .collect();
        let entries = (0..vectors.len())
            .map(|i| {
                (0..vectors.len())
                    .map(|j| {
                        if norms[i] == 0.0 || norms[j] == 0.0 {
                            return None;
                        }
                        let dot: f64 = vectors[i]
                            .iter()
                            .zip(&vectors[j])
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum();
                        Some(dot / (norms[i] * norms[j]))
                    })
                    .collect()
            })
            .collect();
        Self { labels, entries }
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i][j]
    }
}

impl fmt::Display for SimilarityMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.labels.iter().map(|l| l.len()).max().unwrap_or(0).max(8);
        write!(f, "{:width$}", "")?;
        for l in &self.labels {
            write!(f, " {l:>width$}")?;
        }
        writeln!(f)?;
        for (l, row) in self.labels.iter().zip(&self.entries) {
            write!(f, "{l:width$}")?;
            for v in row {
                match v {
                    Some(v) => write!(f, " {v:>width$.6}")?,
                    None => write!(f, " {:>width$}", "zero-norm")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Cosine similarity of the fused weights of one bank across fusions.
pub fn weight_similarity(fused: &[(String, FusedMlp<Tensor>)], bank: Bank) -> SimilarityMatrix {
    let labels = fused.iter().map(|(l, _)| l.clone()).collect();
    let vectors: Vec<Vec<f32>> = fused
        .iter()
        .map(|(_, m)| m.bank(bank).weight.to_vec())
        .collect();
    SimilarityMatrix::from_vectors(labels, &vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_round_trip_to_fixed_slots() {
        for (i, t) in Task::ALL.into_iter().enumerate() {
            assert_eq!(t.index(), i);
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert!(matches!("sharpen".parse::<Task>(), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn prior_is_one_hot() {
        let p = TaskPrior::new(Task::Dehaze, 6).unwrap();
        assert_eq!(p.z().data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.slot(), 2);
        assert!(TaskPrior::new(Task::Blind, 5).is_err());
    }

    #[test]
    fn non_one_hot_vectors_are_rejected() {
        let bad = Tensor::new(&[3], vec![0.5, 0.5, 0.0]).unwrap();
        assert!(matches!(TaskPrior::from_vector(bad, "x"), Err(Error::Contract(_))));
        let two = Tensor::new(&[3], vec![1.0, 1.0, 0.0]).unwrap();
        assert!(TaskPrior::from_vector(two, "x").is_err());
        let ok = Tensor::new(&[3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(TaskPrior::from_vector(ok, "x").unwrap().slot(), 1);
    }

    #[test]
    fn fuse_bank_length_mismatch() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let bank = LinearBank::init(2, 3, 2, &mut rng);
        assert!(fuse_bank(&bank, &[1.0]).is_err());
    }

    #[test]
    fn similarity_flags_zero_norm() {
        let m = SimilarityMatrix::from_vectors(
            vec!["a".into(), "b".into()],
            &[vec![1.0, 0.0], vec![0.0, 0.0]],
        );
        assert_eq!(m.get(0, 0), Some(1.0));
        assert_eq!(m.get(0, 1), None);
        assert!(m.to_string().contains("zero-norm"));
    }
}
