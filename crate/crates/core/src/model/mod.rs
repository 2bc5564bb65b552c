//! Model parameters and the per-cascade forward pass.

pub mod auxiliary;
pub mod backbone;
pub mod heads;
mod state;
pub mod user_rep;

pub use auxiliary::{augment, byol_loss, AugmentedPair, Branch, Predictor, Projector};
pub use backbone::{Adaptor, CascadeRepr, Encoder, Film};
pub use heads::{MacroHead, MacroPooling, MicroHead};
pub use state::{FastVars, FastWeights, ModelState, ModelVars, ModuleRef, Partition, Phase};
pub use user_rep::{HypergraphOperators, UserRepParams, UserTableValues, UserTables};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

use backbone::{AdaptorVars, EncoderVars};
use heads::{MacroHeadVars, MicroHeadVars};

/// Architecture and forward-pass options, fixed for the life of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_users: usize,
    pub dim: usize,
    pub gcn_layers: usize,
    pub hgnn_layers: usize,
    /// Separate initial embeddings for the diffusion encoder.
    pub separate_init: bool,
    pub init_std: f64,
    pub macro_pooling: MacroPooling,
    /// Remove already-adopted users from next-user softmax and ranking.
    pub mask_seen: bool,
}

impl ModelConfig {
    pub fn new(num_users: usize, dim: usize) -> Self {
        Self {
            num_users,
            dim,
            gcn_layers: 2,
            hgnn_layers: 1,
            separate_init: false,
            init_std: 0.1,
            macro_pooling: MacroPooling::Last,
            mask_seen: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users < 2 || self.dim == 0 || self.gcn_layers == 0 || self.hgnn_layers == 0 {
            return Err(Error::invalid(alloc::format!(
                "model needs at least 2 users and positive width and depths, got {self:?}"
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::invalid("init_std must be positive and finite"));
        }
        Ok(())
    }

    /// Row index of the mask token in the embedding tables.
    pub fn mask_index(&self) -> usize {
        self.num_users
    }
}

/// Bound backbone and heads for one forward pass.
#[derive(Clone, Copy)]
pub struct Net<'a> {
    pub tables: &'a UserTables,
    pub encoder: &'a EncoderVars,
    pub adaptor: &'a AdaptorVars,
    pub macro_head: &'a MacroHeadVars,
    pub micro_head: &'a MicroHeadVars,
    pub pooling: MacroPooling,
}

/// Head outputs for one cascade.
#[derive(Clone, Copy, Debug)]
pub struct CascadeOutputs {
    /// `(T−1) × N` scores; row `i` ranks the user at position `i + 1`.
    pub micro_logits: Option<Var>,
    /// `1 × 1` popularity estimate from the observed prefix.
    pub macro_pred: Var,
}

impl Net<'_> {
    /// Adaptation parameters come from the first `observed` users only; the
    /// customized encoder then runs over the whole sequence. The LSTMs are
    /// causal, so the first `observed` rows equal a prefix-only pass.
    pub fn forward(&self, g: &mut Graph, seq: &[usize], observed: usize) -> Result<CascadeOutputs> {
        if observed == 0 || observed > seq.len() {
            return Err(Error::invalid(alloc::format!(
                "observed length {observed} outside 1..={}",
                seq.len()
            )));
        }
        let first = self.encoder.encode(g, self.tables, &seq[..observed])?;
        let e = first.summary(g)?;
        let film = self.adaptor.adapt(g, e)?;
        let custom = self.encoder.customize(g, &film)?;
        let repr = custom.encode(g, self.tables, seq)?;
        let h_sm = repr.h_sm(g)?;
        let h_sp = repr.h_sp(g)?;
        let h_sp = g.slice(h_sp, 0, 0, observed)?;
        Ok(CascadeOutputs {
            micro_logits: self.micro_head.forward(g, h_sm)?,
            macro_pred: self.macro_head.forward(g, h_sp, self.pooling)?,
        })
    }
}
