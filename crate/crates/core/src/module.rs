//! Parameter containers.
//!
//! A [`Module`] is a tree of [`Tensor`]s with a fixed traversal order.
//! Binding a module onto a [`Graph`] yields a mirror tree of [`Var`]s
//! ([`Module::Vars`]) whose [`VarTree::collect`] order matches
//! [`Module::visit`], so gradients line up with parameters by position.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub trait VarTree {
    fn collect(&self, out: &mut Vec<Var>);

    fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }
}

pub trait Module {
    type Vars: VarTree + Clone;

    fn bind(&self, g: &mut Graph, trainable: bool) -> Self::Vars;
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor));
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor));
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |t| out.push(t));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut(&mut |t| out.push(t));
        out
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// SHA-256 over shapes and little-endian values, in traversal order.
    fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        self.visit(&mut |t| {
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        });
        h.finalize().into()
    }
}

impl VarTree for Var {
    fn collect(&self, out: &mut Vec<Var>) {
        out.push(*self);
    }
}

impl<T: VarTree> VarTree for Vec<T> {
    fn collect(&self, out: &mut Vec<Var>) {
        for v in self {
            v.collect(out);
        }
    }
}

impl<T: VarTree> VarTree for Option<T> {
    fn collect(&self, out: &mut Vec<Var>) {
        if let Some(v) = self {
            v.collect(out);
        }
    }
}

macro_rules! tuple_impls {
    ($(($($t:ident $i:tt),+))+) => {$(
        impl<$($t: VarTree),+> VarTree for ($($t,)+) {
            fn collect(&self, out: &mut Vec<Var>) {
                $(self.$i.collect(out);)+
            }
        }

        impl<$($t: Module),+> Module for ($($t,)+) {
            type Vars = ($($t::Vars,)+);

            fn bind(&self, g: &mut Graph, trainable: bool) -> Self::Vars {
                ($(self.$i.bind(g, trainable),)+)
            }

            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
                $(self.$i.visit(f);)+
            }

            fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
                $(self.$i.visit_mut(f);)+
            }

            fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
                $(self.$i.visit_named(&format!("{prefix}.{}", $i), f);)+
            }
        }
    )+};
}

tuple_impls! {
    (A 0, B 1)
    (A 0, B 1, C 2)
    (A 0, B 1, C 2, D 3)
}

impl Module for Tensor {
    type Vars = Var;

    fn bind(&self, g: &mut Graph, trainable: bool) -> Var {
        g.leaf(self.clone(), trainable)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(self)
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        f(self)
    }

    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(prefix, self)
    }
}

impl<M: Module> Module for Vec<M> {
    type Vars = Vec<M::Vars>;

    fn bind(&self, g: &mut Graph, trainable: bool) -> Self::Vars {
        self.iter().map(|m| m.bind(g, trainable)).collect()
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        for m in self {
            m.visit(f);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        for m in self {
            m.visit_mut(f);
        }
    }

    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, m) in self.iter().enumerate() {
            m.visit_named(&format!("{prefix}.{i}"), f);
        }
    }
}

impl<M: Module> Module for Option<M> {
    type Vars = Option<M::Vars>;

    fn bind(&self, g: &mut Graph, trainable: bool) -> Self::Vars {
        self.as_ref().map(|m| m.bind(g, trainable))
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }

    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(m) = self {
            m.visit_named(prefix, f);
        }
    }
}

/// Declares a parameter struct, its `Vars` mirror, and the [`Module`] impl.
#[macro_export]
macro_rules! module {
    (
        $(#[$meta:meta])*
        pub struct $name:ident => $vars:ident {
            $( $(#[$fmeta:meta])* pub $field:ident : $ty:ty ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $( $(#[$fmeta])* pub $field: $ty ),*
        }

        #[derive(Clone, Debug)]
        pub struct $vars {
            $( pub $field: <$ty as $crate::module::Module>::Vars ),*
        }

        impl $crate::module::VarTree for $vars {
            fn collect(&self, out: &mut ::alloc::vec::Vec<$crate::autodiff::Var>) {
                $( $crate::module::VarTree::collect(&self.$field, out); )*
            }
        }

        impl $crate::module::Module for $name {
            type Vars = $vars;

            fn bind(&self, g: &mut $crate::autodiff::Graph, trainable: bool) -> $vars {
                $vars {
                    $( $field: $crate::module::Module::bind(&self.$field, g, trainable) ),*
                }
            }

            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a $crate::tensor::Tensor)) {
                $( $crate::module::Module::visit(&self.$field, f); )*
            }

            fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut $crate::tensor::Tensor)) {
                $( $crate::module::Module::visit_mut(&mut self.$field, f); )*
            }

            fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &$crate::tensor::Tensor)) {
                $(
                    $crate::module::Module::visit_named(
                        &self.$field,
                        &::alloc::format!("{}.{}", prefix, stringify!($field)),
                        f,
                    );
                )*
            }
        }
    };
}

/// Gradients for every var of `vars`, zero where the loss does not reach.
pub fn grads_for<V: VarTree>(grads: &Gradients, vars: &V) -> Vec<Tensor> {
    vars.vars().into_iter().map(|v| grads.get_or_zero(v)).collect()
}

/// Names and shapes of a module's tensors in traversal order.
pub fn manifest<M: Module + ?Sized>(m: &M, prefix: &str) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    m.visit_named(prefix, &mut |name, t| out.push((String::from(name), t.shape().to_vec())));
    out
}

module! {
    /// Affine map `x·W + b` with `W: in × out`, `b: 1 × out`.
    pub struct Linear => LinearVars {
        pub weight: Tensor,
        pub bias: Tensor,
    }
}

impl Linear {
    /// Uniform(±1/√in) weights, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / libm::sqrt(input as f64);
        Self {
            weight: Tensor::uniform(&[input, output], bound, rng),
            bias: Tensor::zeros(&[1, output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[1, output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xw = g.matmul(x, self.weight)?;
        g.add_bias(xw, self.bias)
    }
}
