//! The full restoration network, its fused inference form, counting and
//! checkpoints.

mod checkpoint;
mod complexity;
mod config;
mod network;

pub use checkpoint::{load, load_fused, load_train, save, save_fused, Checkpoint, FORMAT_VERSION};
pub use complexity::{estimate_flops, param_estimate, FlopCount, Mode};
pub use config::DRNetConfig;
pub use network::{
    crop, network_forward, pad_reflect, padded_forward, Block, MlpApply, Network,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::drmlp::{drmlp_fuse, Bank, DrmlpParams, FusedMlp, SimilarityMatrix, Task, TaskPrior};
use crate::error::Result;
use crate::layers::{bind, param_count, ParamTree};
use crate::tensor::{OpStats, Tape, Tensor, Var};

pub type TrainNetwork<P> = Network<P, DrmlpParams<P>>;
pub type FusedNetwork<P> = Network<P, FusedMlp<P>>;

/// Trainable multi-branch network.
#[derive(Clone, Debug)]
pub struct DRNet {
    cfg: DRNetConfig,
    pub params: TrainNetwork<Tensor>,
}

impl DRNet {
    pub fn build(cfg: &DRNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            cfg: cfg.clone(),
            params: Network::init(cfg, &mut rng),
        })
    }

    pub(crate) fn from_parts(cfg: DRNetConfig, params: TrainNetwork<Tensor>) -> Self {
        Self { cfg, params }
    }

    pub fn config(&self) -> &DRNetConfig {
        &self.cfg
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> TrainNetwork<Var<'t>> {
        bind(&self.params, tape, trainable)
    }

    /// Inference through the multi-branch path, padding as needed.
    pub fn forward(&self, x: &Tensor, prior: &TaskPrior) -> Result<Tensor> {
        self.forward_with_stats(x, prior).map(|(y, _)| y)
    }

    pub fn forward_with_stats(&self, x: &Tensor, prior: &TaskPrior) -> Result<(Tensor, OpStats)> {
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let y = padded_forward(&net, &self.cfg, &tape.constant(x.clone()), Some(prior))?;
        Ok((y.value().clone(), tape.stats()))
    }

    /// Collapses every bank for `prior`. Non-MLP tensors share storage with
    /// this model.
    pub fn reconfigure(&self, prior: &TaskPrior) -> Result<FusedDRNet> {
        Ok(FusedDRNet {
            cfg: self.cfg.clone(),
            task: prior.task_name().to_string(),
            params: self.params.map_mlp(|m| drmlp_fuse(m, prior))?,
        })
    }

    /// Cosine similarity between the fused MLP weights of every prior slot,
    /// over all blocks. `bank` restricts it to one bank; `None` uses both.
    pub fn task_similarity(&self, bank: Option<Bank>) -> Result<SimilarityMatrix> {
        let k = self.cfg.num_tasks;
        let mut labels = Vec::with_capacity(k);
        let mut vectors = Vec::with_capacity(k);
        for slot in 0..k {
            let label = Task::ALL
                .get(slot)
                .map_or_else(|| format!("slot{slot}"), |t| t.name().to_string());
            let prior = TaskPrior::from_slot(slot, k, &label)?;
            let mut v = Vec::new();
            for m in self.params.mlps() {
                let fused = drmlp_fuse(m, &prior)?;
                for b in [Bank::First, Bank::Second] {
                    if bank.is_none_or(|want| want == b) {
                        v.extend_from_slice(fused.bank(b).weight.data());
                    }
                }
            }
            labels.push(label);
            vectors.push(v);
        }
        Ok(SimilarityMatrix::from_vectors(labels, &vectors))
    }

    pub fn count_params(&self, mode: Mode) -> usize {
        let total = param_count(&self.params);
        match mode {
            Mode::Train => total,
            Mode::Fused => {
                let surplus: usize = self
                    .params
                    .mlps()
                    .map(|m| {
                        param_count(m)
                            - param_count(&m.bank1.branches[0])
                            - param_count(&m.bank2.branches[0])
                    })
                    .sum();
                total - surplus
            }
        }
    }
}

/// Inference network for one task: every bank is a single affine map.
#[derive(Clone, Debug)]
pub struct FusedDRNet {
    cfg: DRNetConfig,
    task: String,
    pub params: FusedNetwork<Tensor>,
}

impl FusedDRNet {
    pub(crate) fn from_parts(cfg: DRNetConfig, task: String, params: FusedNetwork<Tensor>) -> Self {
        Self { cfg, task, params }
    }

    pub fn config(&self) -> &DRNetConfig {
        &self.cfg
    }

    /// Name of the prior the banks were fused for.
    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> FusedNetwork<Var<'t>> {
        bind(&self.params, tape, trainable)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_stats(x).map(|(y, _)| y)
    }

    pub fn forward_with_stats(&self, x: &Tensor) -> Result<(Tensor, OpStats)> {
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let y = padded_forward(&net, &self.cfg, &tape.constant(x.clone()), None)?;
        Ok((y.value().clone(), tape.stats()))
    }

    pub fn count_params(&self) -> usize {
        param_count(&self.params)
    }

    /// Every stored tensor with its dotted name, in traversal order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        named(&self.params)
    }
}

pub(crate) fn named<T: ParamTree<Tensor>>(tree: &T) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    crate::layers::visit(tree, &mut |name, t: &Tensor| out.push((name.to_string(), t.clone())));
    out
}
