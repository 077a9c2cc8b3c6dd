//! Toy training on synthetic data.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::degrade::{degrade, TaskSpec};
use super::synth::{derive_seed, synth_clean};
use crate::drmlp::Task;
use crate::error::{Error, Result};
use crate::layers::{visit, ParamTree};
use crate::model::{padded_forward, DRNet};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Square training crop side.
    pub crop: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f32,
    /// Learning rate reached at the last step.
    pub lr_min: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub flip: bool,
    pub rot90: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crop: 32,
            batch: 4,
            steps: 2000,
            lr: 2e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            flip: true,
            rot90: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.crop == 0 {
            errs.push("crop must be positive".to_string());
        }
        if self.batch == 0 {
            errs.push("batch must be positive".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..=self.lr).contains(&self.lr_min) {
            errs.push(format!("lr_min {} must lie in [0, lr]", self.lr_min));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Cosine annealing from `lr` at step 0 to `lr_min` at the last step.
    pub fn lr_at(&self, step: usize) -> f32 {
        if self.steps <= 1 {
            return self.lr;
        }
        let progress = step.min(self.steps - 1) as f64 / (self.steps - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        (self.lr_min as f64 + (self.lr - self.lr_min) as f64 * cos) as f32
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean batch ℓ1 loss per step.
    pub losses: Vec<f32>,
    pub lrs: Vec<f32>,
}

impl TrainReport {
    /// Mean loss over steps `range`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.losses[range];
        slice.iter().map(|&v| v as f64).sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Flips and quarter-turn rotations of a square `[C, S, S]` image.
fn augment<R: Rng + ?Sized>(x: &Tensor, flip: bool, rot90: bool, rng: &mut R) -> Tensor {
    let &[c, h, w] = x.shape() else { unreachable!() };
    let do_flip = flip && rng.random_bool(0.5);
    let turns = if rot90 && h == w { rng.random_range(0..4) } else { 0 };
    if !do_flip && turns == 0 {
        return x.clone();
    }
    let src = x.data();
    Tensor::from_fn(&[c, h, w], |idx| {
        let (ch, rest) = (idx / (h * w), idx % (h * w));
        let (mut i, mut j) = (rest / w, rest % w);
        for _ in 0..turns {
            (i, j) = (j, h - 1 - i);
        }
        if do_flip {
            j = w - 1 - j;
        }
        src[(ch * h + i) * w + j]
    })
}

/// One training pair for `task`; the blind task degrades with a randomly
/// chosen specific corruption.
pub fn training_pair(
    tc: &TrainConfig,
    task: &TaskSpec,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = synth_clean(rng.random(), tc.crop, tc.crop);
    let clean = augment(&clean, tc.flip, tc.rot90, &mut rng);
    let degraded = degrade(&clean, task, rng.random())?;
    Ok((degraded, clean))
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(model: &DRNet) -> Self {
        let mut sizes = Vec::new();
        visit(&model.params, &mut |_, p: &Tensor| sizes.push(p.numel()));
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut DRNet, grads: &[Tensor], lr: f32, tc: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.t);
        let bc2 = 1.0 - tc.beta2.powi(self.t);
        let mut k = 0;
        model.params.visit_mut("", &mut |_, p| {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], grads[k].data());
            for (((w, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *mi = tc.beta1 * *mi + (1.0 - tc.beta1) * gi;
                *vi = tc.beta2 * *vi + (1.0 - tc.beta2) * gi * gi;
                *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + tc.adam_eps);
            }
            k += 1;
        });
    }
}

/// Adam on the mean ℓ1 loss, one uniformly drawn task per step.
///
/// `progress` is called after every step with `(step, loss, lr)`.
pub fn train(
    model: &mut DRNet,
    tc: &TrainConfig,
    tasks: &[Task],
    mut progress: impl FnMut(usize, f32, f32),
) -> Result<TrainReport> {
    tc.validate()?;
    if tasks.is_empty() {
        return Err(Error::Contract("train needs at least one task".into()));
    }
    let specs = tasks
        .iter()
        .map(|&t| TaskSpec::new(t, model.config().num_tasks))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = Adam::new(model);
    let mut report = TrainReport::default();

    for step in 0..tc.steps {
        let spec = specs.choose(&mut rng).unwrap();
        // the tape and bound network hold parameter clones; scoping them
        // lets the update write in place
        let (value, flat) = {
            let tape = Tape::new();
            let net = model.bind(&tape, true);
            let mut total: Option<Var<'_>> = None;
            for item in 0..tc.batch {
                let (degraded, clean) =
                    training_pair(tc, spec, derive_seed(tc.seed, &[step as u64, item as u64]))?;
                let x = tape.constant(degraded);
                let y = padded_forward(&net, model.config(), &x, Some(&spec.prior))?;
                let loss = y.l1_loss(&tape.constant(clean))?;
                total = Some(match total {
                    Some(t) => t.add(&loss)?,
                    None => loss,
                });
            }
            let loss = total.expect("batch is positive").scale(1.0 / tc.batch as f32);
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::Divergence(format!("loss {value} at step {step}")));
            }
            let grads = tape.backward(&loss)?;
            let mut flat = Vec::new();
            visit(&net, &mut |_, v: &Var<'_>| flat.push(grads.get_or_zeros(v)));
            (value, flat)
        };
        let lr = tc.lr_at(step);
        adam.step(model, &flat, lr, tc);
        report.losses.push(value);
        report.lrs.push(lr);
        progress(step, value, lr);
    }
    Ok(report)
}
