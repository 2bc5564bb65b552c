//! Popularity and next-user heads with their losses.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::module::Linear;

crate::module! {
    /// `2d → d` (ReLU) `→ 1`, softplus output.
    pub struct MacroHead => MacroHeadVars {
        pub hidden: Linear,
        pub out: Linear,
    }
}

crate::module! {
    /// `2d → N` scores over real users.
    pub struct MicroHead => MicroHeadVars {
        pub out: Linear,
    }
}

/// Which row summary of `h′_sp` feeds the popularity head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MacroPooling {
    #[default]
    Last,
    Mean,
}

impl MacroHead {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(2 * dim, dim, rng),
            out: Linear::new(dim, 1, rng),
        }
    }
}

impl MicroHead {
    pub fn new<R: Rng + ?Sized>(dim: usize, num_users: usize, rng: &mut R) -> Self {
        Self {
            out: Linear::new(2 * dim, num_users, rng),
        }
    }

    pub fn num_users(&self) -> usize {
        self.out.output_dim()
    }
}

impl MacroHeadVars {
    /// Predicted popularity `ŷ ≥ 0` as a `1 × 1` node.
    pub fn forward(&self, g: &mut Graph, h_sp: Var, pooling: MacroPooling) -> Result<Var> {
        let rows = g.shape(h_sp)[0];
        let summary = match pooling {
            MacroPooling::Last => g.slice(h_sp, 0, rows - 1, rows)?,
            MacroPooling::Mean => g.mean_rows(h_sp)?,
        };
        let h = self.hidden.forward(g, summary)?;
        let h = g.relu(h)?;
        let z = self.out.forward(g, h)?;
        g.softplus(z)
    }
}

impl MicroHeadVars {
    /// Scores for positions `1..T` from the states at `0..T−1`
    /// (`(T−1) × N`); `None` for single-step sequences.
    pub fn forward(&self, g: &mut Graph, h_sm: Var) -> Result<Option<Var>> {
        let rows = g.shape(h_sm)[0];
        if rows < 2 {
            return Ok(None);
        }
        let prefix = g.slice(h_sm, 0, 0, rows - 1)?;
        self.out.forward(g, prefix).map(Some)
    }
}

/// `(log(1+ŷ) − log(1+y))²` for one cascade; `pred` is a `1 × 1` node.
pub fn macro_term(g: &mut Graph, pred: Var, truth: f64) -> Result<Var> {
    if !(truth >= 0.0) {
        return Err(Error::domain("macro_loss", alloc::format!("negative popularity {truth}")));
    }
    let lp = g.log1p(pred)?;
    let lp = g.reshape(lp, &[])?;
    let diff = g.offset(lp, -libm::log1p(truth))?;
    g.mul(diff, diff)
}

/// MSLE over a batch of `1 × 1` predictions.
pub fn macro_loss(g: &mut Graph, preds: &[Var], truths: &[f64]) -> Result<Var> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::invalid(alloc::format!(
            "macro_loss needs matching non-empty batches, got {} and {}",
            preds.len(),
            truths.len()
        )));
    }
    let mut terms = Vec::with_capacity(preds.len());
    for (&p, &y) in preds.iter().zip(truths) {
        terms.push(macro_term(g, p, y)?);
    }
    mean_of(g, &terms)
}

/// Value-only MSLE.
pub fn msle(preds: &[f64], truths: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::invalid("msle needs matching non-empty slices"));
    }
    let mut total = 0.0;
    for (&p, &y) in preds.iter().zip(truths) {
        if !(p >= 0.0 && y >= 0.0) {
            return Err(Error::domain("msle", alloc::format!("negative input ({p}, {y})")));
        }
        let d = libm::log1p(p) - libm::log1p(y);
        total += d * d;
    }
    Ok(total / preds.len() as f64)
}

/// Users already in the prefix, for each scored position.
pub fn seen_masks(seq: &[usize]) -> Vec<Vec<usize>> {
    (1..seq.len()).map(|i| seq[..i].to_vec()).collect()
}

/// Summed next-user cross-entropy over positions `1..T`. With `mask_seen`,
/// users already in the prefix are removed from each softmax.
pub fn micro_loss(g: &mut Graph, logits: Var, seq: &[usize], mask_seen: bool) -> Result<Var> {
    if seq.len() < 2 {
        return Err(Error::invalid("micro loss needs at least two events"));
    }
    let excluded = if mask_seen {
        seen_masks(seq)
    } else {
        alloc::vec![Vec::new(); seq.len() - 1]
    };
    g.masked_cross_entropy(logits, &seq[1..], &excluded)
}

/// `(1 − λ)·L_micro + λ·L_macro`.
pub fn primary_loss(g: &mut Graph, micro: Var, macro_: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = g.scale(micro, 1.0 - lambda)?;
    let b = g.scale(macro_, lambda)?;
    g.add(a, b)
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::invalid(alloc::format!("lambda {lambda} outside [0, 1]")))
    }
}

/// Mean of scalar nodes.
pub fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::invalid("mean of an empty batch"))?;
    let mut acc = g.reshape(first, &[])?;
    for &t in rest {
        let t = g.reshape(t, &[])?;
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}
