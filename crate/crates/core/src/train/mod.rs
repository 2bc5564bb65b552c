//! Joint training, meta-auxiliary training, test-time adaptation and
//! evaluation.

mod eval;
mod joint;
mod meta;

pub use eval::{
    evaluate, evaluate_one, inner_adapt, meta_objective, predict, primary_objective, ttt_adapt, EvalOptions, Prediction,
    TttSettings,
};
pub use joint::{joint_train, EpochStats, JointReport};
pub use meta::{meta_train, MetaEpoch, MetaReport};

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::data::{chronological_split, observed_len, Cascade, Dataset, DatasetSplit, DiffusionHypergraphs, SocialGraph};
use crate::error::{Error, Result};
use crate::model::auxiliary::{augment, aux_objective, Branch};
use crate::model::heads::{check_lambda, macro_term, mean_of, micro_loss, primary_loss};
use crate::model::{HypergraphOperators, Net, UserTables};
use crate::rng::derive_seed;

/// Optimization settings shared by the three phases.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the popularity loss in the primary objective.
    pub lambda: f64,
    /// Weight of the auxiliary loss.
    pub gamma: f64,
    /// EMA decay of the target branch.
    pub tau: f64,
    /// Cascades per meta-iteration.
    pub meta_batch: usize,
    /// Inner (and test-time) SGD steps.
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub meta_lr: f64,
    pub joint_epochs: usize,
    pub meta_epochs: usize,
    pub seed: u64,
    /// Select the best epoch on validation data when any is available.
    pub select_best: bool,
    /// Abort meta-training when more than this fraction of tasks per epoch
    /// are skipped.
    pub max_skip_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 0.001,
            lambda: 0.3,
            gamma: 0.1,
            tau: 0.99,
            meta_batch: 5,
            inner_steps: 2,
            inner_lr: 0.0005,
            meta_lr: 0.0002,
            joint_epochs: 20,
            meta_epochs: 10,
            seed: 0,
            select_best: true,
            max_skip_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("meta_batch", self.meta_batch as f64),
            ("lr", self.lr),
            ("meta_lr", self.meta_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(alloc::format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [("gamma", self.gamma), ("inner_lr", self.inner_lr)];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(alloc::format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return Err(Error::invalid("tau and max_skip_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A cascade prepared for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub seq: Vec<usize>,
    /// Length of the observed prefix.
    pub observed: usize,
    pub final_size: f64,
}

impl Sample {
    pub fn new(cascade: &Cascade, observed_fraction: f64) -> Self {
        Self {
            id: String::from(cascade.id()),
            seq: cascade.users(),
            observed: observed_len(cascade.len(), observed_fraction),
            final_size: cascade.final_size() as f64,
        }
    }

    pub fn prefix(&self) -> &[usize] {
        &self.seq[..self.observed]
    }
}

/// Graph, diffusion hypergraphs and prepared splits.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub graph: SocialGraph,
    pub hypergraphs: DiffusionHypergraphs,
    pub ops: HypergraphOperators,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    pub observed_fraction: f64,
}

/// Interval count for the diffusion hypergraphs.
pub const DEFAULT_INTERVALS: usize = 8;
pub const DEFAULT_OBSERVED_FRACTION: f64 = 0.5;
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.8, 0.1, 0.1);

impl Corpus {
    pub fn new(dataset: &Dataset, fractions: (f64, f64, f64), intervals: usize, observed_fraction: f64) -> Result<Self> {
        let split = chronological_split(&dataset.cascades, fractions)?;
        Self::from_split(dataset.graph.clone(), &split, intervals, observed_fraction)
    }

    pub fn from_split(graph: SocialGraph, split: &DatasetSplit, intervals: usize, observed_fraction: f64) -> Result<Self> {
        if !(observed_fraction > 0.0 && observed_fraction < 1.0) {
            return Err(Error::invalid(alloc::format!(
                "observation fraction {observed_fraction} outside (0, 1)"
            )));
        }
        let hypergraphs = DiffusionHypergraphs::build(&split.train, intervals)?;
        hypergraphs.check_users(graph.num_users())?;
        for c in split.train.iter().chain(&split.valid).chain(&split.test) {
            if let Some(&u) = c.users().iter().find(|&&u| u >= graph.num_users()) {
                return Err(Error::InvalidData(alloc::format!(
                    "cascade {} references user {u} outside the graph",
                    c.id()
                )));
            }
        }
        let prep = |cs: &[Cascade]| cs.iter().map(|c| Sample::new(c, observed_fraction)).collect();
        Ok(Self {
            ops: HypergraphOperators::new(&hypergraphs)?,
            hypergraphs,
            train: prep(&split.train),
            valid: prep(&split.valid),
            test: prep(&split.test),
            observed_fraction,
            graph,
        })
    }

    /// Training-only corpus over explicit cascades (overfit harnesses).
    pub fn train_only(graph: SocialGraph, cascades: &[Cascade], intervals: usize, observed_fraction: f64) -> Result<Self> {
        let split = DatasetSplit {
            train: cascades.to_vec(),
            valid: Vec::new(),
            test: Vec::new(),
            fractions: (1.0, 0.0, 0.0),
        };
        Self::from_split(graph, &split, intervals, observed_fraction)
    }
}

/// Seed for the augmented views of one cascade in one round.
pub fn view_seed(base: u64, id: &str, round: u64) -> u64 {
    derive_seed(base, id, round)
}

/// Primary-loss terms for one cascade: summed next-user cross-entropy
/// (absent for single-event cascades) and the squared log error.
pub(crate) fn primary_terms(g: &mut Graph, net: &Net<'_>, s: &Sample, mask_seen: bool) -> Result<(Option<Var>, Var)> {
    let out = net.forward(g, &s.seq, s.observed)?;
    let micro = match out.micro_logits {
        Some(logits) => Some(micro_loss(g, logits, &s.seq, mask_seen)?),
        None => None,
    };
    Ok((micro, macro_term(g, out.macro_pred, s.final_size)?))
}

/// Auxiliary loss on the observed prefix of one cascade.
pub(crate) fn aux_term(
    g: &mut Graph,
    online: Branch<'_>,
    target: Branch<'_>,
    tables: &UserTables,
    s: &Sample,
    mask_index: usize,
    seed: u64,
) -> Result<Var> {
    let pair = augment(s.prefix(), mask_index, seed)?;
    aux_objective(g, online, target, tables, &pair.masked, &pair.shuffled)
}

/// Batch losses as graph nodes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BatchLoss {
    pub primary: Var,
    pub aux: Option<Var>,
    pub total: Var,
}

/// `L_Pri` (mean micro sum, mean squared log error, mixed by λ) plus
/// `γ·mean L_Aux` when `aux` is given.
pub(crate) fn batch_loss(
    g: &mut Graph,
    net: &Net<'_>,
    samples: &[&Sample],
    lambda: f64,
    mask_seen: bool,
    aux: Option<(f64, &mut dyn FnMut(&mut Graph, &Sample) -> Result<Var>)>,
) -> Result<BatchLoss> {
    let mut micro = Vec::new();
    let mut macro_ = Vec::new();
    for s in samples {
        let (mi, ma) = primary_terms(g, net, s, mask_seen)?;
        micro.extend(mi);
        macro_.push(ma);
    }
    let micro = if micro.is_empty() {
        g.constant(crate::tensor::Tensor::scalar(0.0))
    } else {
        mean_of(g, &micro)?
    };
    let macro_ = mean_of(g, &macro_)?;
    let primary = primary_loss(g, micro, macro_, lambda)?;
    let (aux, total) = match aux {
        Some((weight, term)) if weight > 0.0 => {
            let mut terms = Vec::with_capacity(samples.len());
            for s in samples {
                terms.push(term(g, s)?);
            }
            let mean = mean_of(g, &terms)?;
            let weighted = g.scale(mean, weight)?;
            (Some(mean), g.add(primary, weighted)?)
        }
        _ => (None, primary),
    };
    Ok(BatchLoss { primary, aux, total })
}
