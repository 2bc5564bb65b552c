//! Self-supervised auxiliary task: masked and span-shuffled views of a
//! cascade, online/target projection stacks and the symmetric BYOL loss.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::module::{Linear, Module};
use crate::optim::ema_update;
use crate::rng;

use super::backbone::{AdaptorVars, EncoderVars};
use super::user_rep::UserTables;

pub const MASK_PROB: f64 = 0.2;
pub const SHUFFLE_FRACTION: f64 = 0.2;

crate::module! {
    /// `4d → d` (tanh) `→ d` over `[mean h′_sm ‖ mean h′_sp]`.
    pub struct Projector => ProjectorVars {
        pub hidden: Linear,
        pub out: Linear,
    }
}

crate::module! {
    /// Residual `q + W₂·ReLU(W₁·q)`; `W₂` starts at zero.
    pub struct Predictor => PredictorVars {
        pub hidden: Linear,
        pub out: Linear,
    }
}

impl Projector {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(4 * dim, dim, rng),
            out: Linear::new(dim, dim, rng),
        }
    }
}

impl Predictor {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(dim, dim, rng),
            out: Linear::zeros(dim, dim),
        }
    }
}

impl ProjectorVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.tanh(h)?;
        self.out.forward(g, h)
    }
}

impl PredictorVars {
    pub fn forward(&self, g: &mut Graph, q: Var) -> Result<Var> {
        let h = self.hidden.forward(g, q)?;
        let h = g.relu(h)?;
        let delta = self.out.forward(g, h)?;
        g.add(q, delta)
    }
}

/// Two views of one cascade plus what was done to produce them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedPair {
    /// Source with masked positions replaced by the mask index.
    pub masked: Vec<usize>,
    /// Source with one span permuted.
    pub shuffled: Vec<usize>,
    pub mask_positions: Vec<usize>,
    pub span_start: usize,
    /// `permutation[k]` is the source offset placed at `span_start + k`.
    pub permutation: Vec<usize>,
}

impl AugmentedPair {
    /// Rebuilds both views of `seq` from the recorded descriptors.
    pub fn replay(&self, seq: &[usize], mask_index: usize) -> (Vec<usize>, Vec<usize>) {
        let mut masked = seq.to_vec();
        for &p in &self.mask_positions {
            masked[p] = mask_index;
        }
        let mut shuffled = seq.to_vec();
        for (k, &src) in self.permutation.iter().enumerate() {
            shuffled[self.span_start + k] = seq[self.span_start + src];
        }
        (masked, shuffled)
    }
}

/// `clamp(round(0.2·len), min(2, len), len)`.
pub fn shuffle_span(len: usize) -> usize {
    let span = libm::round(SHUFFLE_FRACTION * len as f64) as usize;
    span.clamp(len.min(2), len)
}

/// Default views: masking with probability 0.2, one shuffled span.
pub fn augment(seq: &[usize], mask_index: usize, seed: u64) -> Result<AugmentedPair> {
    augment_with(seq, mask_index, MASK_PROB, shuffle_span(seq.len()), seed)
}

/// [`augment`] with an explicit mask probability and span length.
pub fn augment_with(
    seq: &[usize],
    mask_index: usize,
    mask_prob: f64,
    span: usize,
    seed: u64,
) -> Result<AugmentedPair> {
    if seq.is_empty() {
        return Err(Error::invalid("cannot augment an empty sequence"));
    }
    if !(0.0..=1.0).contains(&mask_prob) || span == 0 || span > seq.len() {
        return Err(Error::invalid(alloc::format!(
            "augmentation needs mask_prob in [0, 1] and span in 1..={}, got {mask_prob} and {span}",
            seq.len()
        )));
    }
    let mut r = rng::seeded(seed);
    let mask_positions: Vec<usize> = (0..seq.len()).filter(|_| r.random_bool(mask_prob)).collect();
    let span_start = r.random_range(0..=seq.len() - span);
    let mut permutation: Vec<usize> = (0..span).collect();
    permutation.shuffle(&mut r);
    if span > 1 && permutation.iter().enumerate().all(|(k, &p)| k == p) {
        permutation.rotate_left(1);
    }
    let mut pair = AugmentedPair {
        masked: Vec::new(),
        shuffled: Vec::new(),
        mask_positions,
        span_start,
        permutation,
    };
    let (masked, shuffled) = pair.replay(seq, mask_index);
    pair.masked = masked;
    pair.shuffled = shuffled;
    Ok(pair)
}

/// `2 − 2·cos(r, z)` as a graph node.
pub fn byol_loss(g: &mut Graph, r: Var, z: Var) -> Result<Var> {
    if g.shape(r) != g.shape(z) {
        return Err(Error::shape("byol_loss", g.shape(r), g.shape(z)));
    }
    let rn = g.l2_normalize(r)?;
    let zn = g.l2_normalize(z)?;
    let prod = g.mul(rn, zn)?;
    let cos = g.sum(prod)?;
    let neg = g.scale(cos, -2.0)?;
    g.offset(neg, 2.0)
}

/// Value-only form of [`byol_loss`].
pub fn byol_value(r: &[f64], z: &[f64]) -> Result<f64> {
    if r.len() != z.len() {
        return Err(Error::shape("byol_loss", &[r.len()], &[z.len()]));
    }
    let nr = libm::sqrt(r.iter().map(|x| x * x).sum());
    let nz = libm::sqrt(z.iter().map(|x| x * x).sum());
    if nr == 0.0 || nz == 0.0 {
        return Err(Error::domain("byol_loss", "zero-norm input"));
    }
    let dot: f64 = r.iter().zip(z).map(|(a, b)| a * b).sum();
    Ok(2.0 - 2.0 * dot / (nr * nz))
}

/// One side of the auxiliary network. The online side has a predictor,
/// the target side does not.
#[derive(Clone, Copy)]
pub struct Branch<'a> {
    pub encoder: &'a EncoderVars,
    pub adaptor: &'a AdaptorVars,
    pub projector: &'a ProjectorVars,
    pub predictor: Option<&'a PredictorVars>,
}

impl Branch<'_> {
    /// Projection (and prediction, online side) of the pooled customized
    /// representation, `1 × d`.
    pub fn embed(&self, g: &mut Graph, tables: &UserTables, seq: &[usize]) -> Result<Var> {
        let repr = self.encoder.encode_adapted(g, self.adaptor, tables, seq)?;
        let sm = repr.h_sm(g)?;
        let sp = repr.h_sp(g)?;
        let pooled = [g.mean_rows(sm)?, g.mean_rows(sp)?];
        let pooled = g.concat(&pooled, 1)?;
        let q = self.projector.forward(g, pooled)?;
        match self.predictor {
            Some(p) => p.forward(g, q),
            None => Ok(q),
        }
    }
}

/// `L_Aux = byol(r(a), z(ã)) + byol(r(ã), z(a))`.
pub fn aux_objective(
    g: &mut Graph,
    online: Branch<'_>,
    target: Branch<'_>,
    tables: &UserTables,
    view_a: &[usize],
    view_b: &[usize],
) -> Result<Var> {
    let ra = online.embed(g, tables, view_a)?;
    let rb = online.embed(g, tables, view_b)?;
    let za = target.embed(g, tables, view_a)?;
    let zb = target.embed(g, tables, view_b)?;
    let l1 = byol_loss(g, ra, zb)?;
    let l2 = byol_loss(g, rb, za)?;
    g.add(l1, l2)
}

/// `ξ ← τ·ξ + (1 − τ)·θ` over matching module trees.
pub fn update_target<M: Module>(target: &mut M, online: &M, tau: f64) -> Result<()> {
    let src = online.tensors();
    let mut dst = target.tensors_mut();
    if src.len() != dst.len() {
        return Err(Error::invalid(alloc::format!(
            "target has {} tensors, online has {}",
            dst.len(),
            src.len()
        )));
    }
    ema_update(&mut dst, &src, tau)
}
