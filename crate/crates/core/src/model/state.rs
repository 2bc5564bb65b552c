use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::data::SocialGraph;
use crate::error::{Error, Result};
use crate::module::{Module, VarTree};
use crate::rng;
use crate::tensor::Tensor;

use super::auxiliary::{Branch, Predictor, PredictorVars, Projector, ProjectorVars};
use super::backbone::{Adaptor, AdaptorVars, Encoder, EncoderVars};
use super::heads::{MacroHead, MacroHeadVars, MicroHead, MicroHeadVars};
use super::user_rep::{HypergraphOperators, UserRepParams, UserRepVars, UserTableValues, UserTables};
use super::{ModelConfig, Net};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    UserRep,
    Encoder,
    Adaptor,
    Projector,
    Predictor,
    MacroHead,
    MicroHead,
    TargetAdaptor,
    TargetProjector,
}

impl Partition {
    pub const ALL: [Partition; 9] = [
        Partition::UserRep,
        Partition::Encoder,
        Partition::Adaptor,
        Partition::Projector,
        Partition::Predictor,
        Partition::MacroHead,
        Partition::MicroHead,
        Partition::TargetAdaptor,
        Partition::TargetProjector,
    ];

    /// Partitions adapted per cascade in the inner loop and at test time.
    pub const FAST: [Partition; 3] = [Partition::Adaptor, Partition::Projector, Partition::Predictor];

    pub fn name(self) -> &'static str {
        match self {
            Partition::UserRep => "user_rep",
            Partition::Encoder => "encoder",
            Partition::Adaptor => "adaptor",
            Partition::Projector => "projector",
            Partition::Predictor => "predictor",
            Partition::MacroHead => "macro_head",
            Partition::MicroHead => "micro_head",
            Partition::TargetAdaptor => "target_adaptor",
            Partition::TargetProjector => "target_projector",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Joint,
    Meta,
    Test,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Joint => "joint",
            Phase::Meta => "meta",
            Phase::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Phase::Joint),
            "meta" => Ok(Phase::Meta),
            "test" => Ok(Phase::Test),
            other => Err(Error::invalid(alloc::format!("unknown phase tag `{other}`"))),
        }
    }

    /// Partitions updated by gradient steps during this phase.
    pub fn trainable(self) -> &'static [Partition] {
        use Partition::*;
        match self {
            Phase::Joint => &[UserRep, Encoder, Adaptor, Projector, Predictor, MacroHead, MicroHead],
            Phase::Meta => &[Adaptor, Projector, Predictor, MacroHead, MicroHead],
            Phase::Test => &[],
        }
    }

    /// Partitions that must stay bitwise constant during this phase.
    pub fn frozen(self) -> &'static [Partition] {
        use Partition::*;
        match self {
            Phase::Joint => &[],
            Phase::Meta => &[UserRep, Encoder, TargetAdaptor, TargetProjector],
            Phase::Test => &Partition::ALL,
        }
    }
}

crate::module! {
    /// Per-cascade copies of the adapted partitions (φ).
    pub struct FastWeights => FastVars {
        pub adaptor: Adaptor,
        pub projector: Projector,
        pub predictor: Predictor,
    }
}

/// All parameters of the model, grouped by partition.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub phase: Phase,
    pub frozen: [bool; 9],
    pub user_rep: UserRepParams,
    pub encoder: Encoder,
    pub adaptor: Adaptor,
    pub projector: Projector,
    pub predictor: Predictor,
    pub macro_head: MacroHead,
    pub micro_head: MicroHead,
    pub target_adaptor: Adaptor,
    pub target_projector: Projector,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut r = rng::derived(seed, "model-init", 0);
        let user_rep = UserRepParams::new(
            config.num_users,
            d,
            config.gcn_layers,
            config.hgnn_layers,
            config.separate_init,
            config.init_std,
            &mut r,
        );
        let encoder = Encoder::new(d, &mut r);
        let adaptor = Adaptor::new(d, &mut r);
        let projector = Projector::new(d, &mut r);
        let predictor = Predictor::new(d, &mut r);
        let macro_head = MacroHead::new(d, &mut r);
        let micro_head = MicroHead::new(d, config.num_users, &mut r);
        let mut state = Self {
            target_adaptor: adaptor.clone(),
            target_projector: projector.clone(),
            config,
            phase: Phase::Joint,
            frozen: [false; 9],
            user_rep,
            encoder,
            adaptor,
            projector,
            predictor,
            macro_head,
            micro_head,
        };
        state.enter_phase(Phase::Joint);
        Ok(state)
    }

    pub fn enter_phase(&mut self, phase: Phase) {
        self.phase = phase;
        self.frozen = [false; 9];
        for p in phase.frozen() {
            self.frozen[p.index()] = true;
        }
    }

    pub fn is_frozen(&self, p: Partition) -> bool {
        self.frozen[p.index()]
    }

    pub fn partition(&self, p: Partition) -> &dyn ModuleRef {
        match p {
            Partition::UserRep => &self.user_rep,
            Partition::Encoder => &self.encoder,
            Partition::Adaptor => &self.adaptor,
            Partition::Projector => &self.projector,
            Partition::Predictor => &self.predictor,
            Partition::MacroHead => &self.macro_head,
            Partition::MicroHead => &self.micro_head,
            Partition::TargetAdaptor => &self.target_adaptor,
            Partition::TargetProjector => &self.target_projector,
        }
    }

    pub fn checksum(&self, p: Partition) -> [u8; 32] {
        self.partition(p).checksum_dyn()
    }

    /// `name → tensor` for every parameter, partitions in canonical order.
    pub fn visit_named(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for p in Partition::ALL {
            self.partition(p).visit_named_dyn(p.name(), f);
        }
    }

    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_named(&mut |n, t| out.push((String::from(n), t.shape().to_vec())));
        out
    }

    /// Mutable tensors of the listed partitions, in canonical order.
    pub fn tensors_mut_of(&mut self, parts: &[Partition]) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let has = |p| parts.contains(&p);
        let Self {
            user_rep,
            encoder,
            adaptor,
            projector,
            predictor,
            macro_head,
            micro_head,
            target_adaptor,
            target_projector,
            ..
        } = self;
        let mut push = |t| out.push(t);
        if has(Partition::UserRep) {
            user_rep.visit_mut(&mut push);
        }
        if has(Partition::Encoder) {
            encoder.visit_mut(&mut push);
        }
        if has(Partition::Adaptor) {
            adaptor.visit_mut(&mut push);
        }
        if has(Partition::Projector) {
            projector.visit_mut(&mut push);
        }
        if has(Partition::Predictor) {
            predictor.visit_mut(&mut push);
        }
        if has(Partition::MacroHead) {
            macro_head.visit_mut(&mut push);
        }
        if has(Partition::MicroHead) {
            micro_head.visit_mut(&mut push);
        }
        if has(Partition::TargetAdaptor) {
            target_adaptor.visit_mut(&mut push);
        }
        if has(Partition::TargetProjector) {
            target_projector.visit_mut(&mut push);
        }
        out
    }

    /// Mutable tensors for every parameter, canonical order.
    pub fn all_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors_mut_of(&Partition::ALL)
    }

    pub fn fast_weights(&self) -> FastWeights {
        FastWeights {
            adaptor: self.adaptor.clone(),
            projector: self.projector.clone(),
            predictor: self.predictor.clone(),
        }
    }

    /// Materialized embedding tables.
    pub fn user_tables(&self, graph: &SocialGraph, ops: &HypergraphOperators) -> Result<UserTableValues> {
        self.user_rep.embed(graph, ops)
    }

    /// Binds everything except the user encoders, using fixed tables.
    pub fn bind_with_tables(&self, g: &mut Graph, trainable: &[Partition], tables: &UserTableValues) -> ModelVars {
        let tables = UserTables::constant(g, tables);
        self.bind_rest(g, trainable, None, tables)
    }

    /// Binds everything, running the user encoders on the tape.
    pub fn bind_with_encoders(
        &self,
        g: &mut Graph,
        trainable: &[Partition],
        graph: &SocialGraph,
        ops: &HypergraphOperators,
    ) -> Result<ModelVars> {
        let uv = self.user_rep.bind(g, trainable.contains(&Partition::UserRep));
        let tables = uv.tables(g, graph, ops)?;
        Ok(self.bind_rest(g, trainable, Some(uv), tables))
    }

    fn bind_rest(&self, g: &mut Graph, trainable: &[Partition], user_rep: Option<UserRepVars>, tables: UserTables) -> ModelVars {
        let t = |p| trainable.contains(&p);
        ModelVars {
            user_rep,
            tables,
            encoder: self.encoder.bind(g, t(Partition::Encoder)),
            adaptor: self.adaptor.bind(g, t(Partition::Adaptor)),
            projector: self.projector.bind(g, t(Partition::Projector)),
            predictor: self.predictor.bind(g, t(Partition::Predictor)),
            macro_head: self.macro_head.bind(g, t(Partition::MacroHead)),
            micro_head: self.micro_head.bind(g, t(Partition::MicroHead)),
            target_adaptor: self.target_adaptor.bind(g, false),
            target_projector: self.target_projector.bind(g, false),
            pooling: self.config.macro_pooling,
        }
    }
}

/// Object-safe view of a parameter partition.
pub trait ModuleRef {
    fn checksum_dyn(&self) -> [u8; 32];
    fn visit_named_dyn(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn num_params_dyn(&self) -> usize;
}

impl<M: Module> ModuleRef for M {
    fn checksum_dyn(&self) -> [u8; 32] {
        self.checksum()
    }

    fn visit_named_dyn(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visit_named(prefix, f)
    }

    fn num_params_dyn(&self) -> usize {
        self.num_params()
    }
}

/// A [`ModelState`] bound onto a graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub user_rep: Option<UserRepVars>,
    pub tables: UserTables,
    pub encoder: EncoderVars,
    pub adaptor: AdaptorVars,
    pub projector: ProjectorVars,
    pub predictor: PredictorVars,
    pub macro_head: MacroHeadVars,
    pub micro_head: MicroHeadVars,
    pub target_adaptor: AdaptorVars,
    pub target_projector: ProjectorVars,
    pub pooling: super::MacroPooling,
}

impl ModelVars {
    /// Backbone and heads, with the given adaptor.
    pub fn net<'a>(&'a self, adaptor: &'a AdaptorVars) -> Net<'a> {
        Net {
            tables: &self.tables,
            encoder: &self.encoder,
            adaptor,
            macro_head: &self.macro_head,
            micro_head: &self.micro_head,
            pooling: self.pooling,
        }
    }

    pub fn online(&self) -> Branch<'_> {
        Branch {
            encoder: &self.encoder,
            adaptor: &self.adaptor,
            projector: &self.projector,
            predictor: Some(&self.predictor),
        }
    }

    /// EMA target branch (joint training).
    pub fn ema_target(&self) -> Branch<'_> {
        Branch {
            encoder: &self.encoder,
            adaptor: &self.target_adaptor,
            projector: &self.target_projector,
            predictor: None,
        }
    }

    /// The model itself as target (meta-training and test time).
    pub fn self_target(&self) -> Branch<'_> {
        Branch {
            predictor: None,
            ..self.online()
        }
    }

    /// Vars of the listed partitions, in canonical order.
    pub fn vars_of(&self, parts: &[Partition]) -> Vec<Var> {
        let mut out = Vec::new();
        for p in Partition::ALL {
            if !parts.contains(&p) {
                continue;
            }
            match p {
                Partition::UserRep => {
                    if let Some(u) = &self.user_rep {
                        u.collect(&mut out)
                    }
                }
                Partition::Encoder => self.encoder.collect(&mut out),
                Partition::Adaptor => self.adaptor.collect(&mut out),
                Partition::Projector => self.projector.collect(&mut out),
                Partition::Predictor => self.predictor.collect(&mut out),
                Partition::MacroHead => self.macro_head.collect(&mut out),
                Partition::MicroHead => self.micro_head.collect(&mut out),
                Partition::TargetAdaptor => self.target_adaptor.collect(&mut out),
                Partition::TargetProjector => self.target_projector.collect(&mut out),
            }
        }
        out
    }
}

impl FastVars {
    pub fn online<'a>(&'a self, encoder: &'a EncoderVars) -> Branch<'a> {
        Branch {
            encoder,
            adaptor: &self.adaptor,
            projector: &self.projector,
            predictor: Some(&self.predictor),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_start_as_copies_and_manifest_is_ordered() {
        let s = ModelState::new(ModelConfig::new(6, 3), 1).unwrap();
        assert_eq!(s.checksum(Partition::Adaptor), s.checksum(Partition::TargetAdaptor));
        let m = s.manifest();
        assert!(m[0].0.starts_with("user_rep."));
        assert!(m.last().unwrap().0.starts_with("target_projector."));
        let total: usize = m.iter().map(|(_, sh)| sh.iter().product::<usize>()).sum();
        let mut s2 = s.clone();
        assert_eq!(total, s2.all_tensors_mut().iter().map(|t| t.numel()).sum::<usize>());
    }

    #[test]
    fn canonical_order_agrees_between_tensors_and_vars() {
        let s = ModelState::new(ModelConfig::new(5, 2), 2).unwrap();
        let tables = UserTableValues {
            social: Tensor::zeros(&[6, 2]),
            diffusion: Tensor::zeros(&[6, 2]),
        };
        let mut g = Graph::new();
        let parts = [Partition::MicroHead, Partition::Adaptor, Partition::Predictor];
        let vars = s.bind_with_tables(&mut g, &parts, &tables);
        let shapes: Vec<_> = vars.vars_of(&parts).iter().map(|v| g.shape(*v).to_vec()).collect();
        let mut s2 = s.clone();
        let expect: Vec<_> = s2.tensors_mut_of(&parts).iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, expect);
    }

    #[test]
    fn phases_parse_and_freeze() {
        let mut s = ModelState::new(ModelConfig::new(5, 2), 0).unwrap();
        assert!(!s.is_frozen(Partition::Encoder));
        s.enter_phase(Phase::Meta);
        assert!(s.is_frozen(Partition::Encoder) && s.is_frozen(Partition::UserRep));
        assert!(!s.is_frozen(Partition::Adaptor));
        assert_eq!(Phase::parse("meta").unwrap(), Phase::Meta);
        assert!(Phase::parse("warmup").is_err());
    }
}
