//! Social (GCN) and diffusion-aware (per-interval HGNN with gated fusion)
//! user embedding tables.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::data::{DiffusionHypergraphs, SocialGraph};
use crate::error::{Error, Result};
use crate::module::{Linear, Module};
use crate::sparse::Csr;
use crate::tensor::Tensor;

crate::module! {
    /// One HGNN layer: node-to-hyperedge weight `w_node` and
    /// hyperedge-to-node weight `w_edge`, both `d × d`.
    pub struct HgnnLayer => HgnnLayerVars {
        pub w_node: Tensor,
        pub w_edge: Tensor,
    }
}

crate::module! {
    pub struct UserRepParams => UserRepVars {
        /// Initial embeddings `X⁰`, `N × d`. Feeds both encoders unless
        /// `init_diffusion` is present.
        pub init_social: Tensor,
        pub init_diffusion: Option<Tensor>,
        pub gcn: Vec<Linear>,
        pub hgnn: Vec<HgnnLayer>,
        /// Scalar fusion gate over `[x⁰ ‖ x^L]`, `2d → 1`.
        pub gate: Linear,
        /// Extra row appended to `X_S` for masked positions.
        pub mask_social: Tensor,
        /// Extra row appended to `X_D` for masked positions.
        pub mask_diffusion: Tensor,
    }
}

/// Per-interval aggregation operators for the diffusion encoder.
#[derive(Clone, Debug)]
pub struct IntervalOperator {
    /// Users active in the interval (sorted); local row `k` is `users[k]`.
    pub users: Vec<usize>,
    /// `|E| × |U|`, entry `1/|e_j|` for each member of hyperedge `j`.
    pub node_to_edge: Arc<Csr>,
    /// `|U| × |E|`, entry `1/|E_i|` for each hyperedge containing user `i`.
    pub edge_to_node: Arc<Csr>,
}

#[derive(Clone, Debug, Default)]
pub struct HypergraphOperators {
    pub intervals: Vec<IntervalOperator>,
}

impl HypergraphOperators {
    pub fn new(hg: &DiffusionHypergraphs) -> Result<Self> {
        let mut intervals = Vec::new();
        for iv in hg.intervals() {
            if iv.hyperedges.is_empty() {
                continue;
            }
            let local = |u: usize| iv.users.binary_search(&u).expect("member listed in interval users");
            let mut n2e = Vec::new();
            let mut memberships = vec![0usize; iv.users.len()];
            for (j, edge) in iv.hyperedges.iter().enumerate() {
                let w = 1.0 / edge.len() as f64;
                for &u in edge {
                    let k = local(u);
                    n2e.push((j, k, w));
                    memberships[k] += 1;
                }
            }
            let e2n: Vec<_> = n2e
                .iter()
                .map(|&(j, k, _)| (k, j, 1.0 / memberships[k] as f64))
                .collect();
            intervals.push(IntervalOperator {
                users: iv.users.clone(),
                node_to_edge: Arc::new(Csr::from_triplets(iv.hyperedges.len(), iv.users.len(), &n2e)?),
                edge_to_node: Arc::new(Csr::from_triplets(iv.users.len(), iv.hyperedges.len(), &e2n)?),
            });
        }
        Ok(Self { intervals })
    }
}

/// Embedding tables as graph nodes, each `(N + 1) × d` with the mask row last.
#[derive(Clone, Copy, Debug)]
pub struct UserTables {
    pub social: Var,
    pub diffusion: Var,
}

impl UserTables {
    pub fn constant(g: &mut Graph, tables: &UserTableValues) -> Self {
        Self {
            social: g.constant(tables.social.clone()),
            diffusion: g.constant(tables.diffusion.clone()),
        }
    }
}

/// Materialized `(N + 1) × d` tables, used when the encoders are frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct UserTableValues {
    pub social: Tensor,
    pub diffusion: Tensor,
}

impl UserTableValues {
    /// Row index of the mask token.
    pub fn mask_index(&self) -> usize {
        self.social.shape()[0] - 1
    }
}

impl UserRepParams {
    pub fn new<R: Rng + ?Sized>(
        num_users: usize,
        dim: usize,
        gcn_layers: usize,
        hgnn_layers: usize,
        separate_init: bool,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let init_social = Tensor::randn(&[num_users, dim], init_std, rng);
        let init_diffusion = separate_init.then(|| Tensor::randn(&[num_users, dim], init_std, rng));
        let gcn = (0..gcn_layers).map(|_| Linear::new(dim, dim, rng)).collect();
        let bound = 1.0 / libm::sqrt(dim as f64);
        let hgnn = (0..hgnn_layers)
            .map(|_| HgnnLayer {
                w_node: Tensor::uniform(&[dim, dim], bound, rng),
                w_edge: Tensor::uniform(&[dim, dim], bound, rng),
            })
            .collect();
        Self {
            init_social,
            init_diffusion,
            gcn,
            hgnn,
            gate: Linear::new(2 * dim, 1, rng),
            mask_social: Tensor::randn(&[1, dim], init_std, rng),
            mask_diffusion: Tensor::randn(&[1, dim], init_std, rng),
        }
    }

    pub fn num_users(&self) -> usize {
        self.init_social.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.init_social.shape()[1]
    }

    /// Forward pass without a gradient tape consumer.
    pub fn embed(&self, graph: &SocialGraph, ops: &HypergraphOperators) -> Result<UserTableValues> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let tables = vars.tables(&mut g, graph, ops)?;
        Ok(UserTableValues {
            social: g.value(tables.social).clone(),
            diffusion: g.value(tables.diffusion).clone(),
        })
    }
}

impl UserRepVars {
    /// `X_S`: stacked GCN layers `ReLU(Â·X·W + b)`, the last one linear.
    pub fn encode_social(&self, g: &mut Graph, graph: &SocialGraph) -> Result<Var> {
        let n = g.shape(self.init_social)[0];
        if graph.num_users() != n {
            return Err(Error::shape("encode_social", &[graph.num_users()], &[n]));
        }
        let mut x = self.init_social;
        for (l, layer) in self.gcn.iter().enumerate() {
            let agg = g.spmm(graph.normalized_adjacency(), x)?;
            x = layer.forward(g, agg)?;
            if l + 1 < self.gcn.len() {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    /// `X_D`: for each interval, HGNN layers over the active users followed
    /// by gated fusion with the interval's starting state; inactive users
    /// carry their state forward unchanged.
    pub fn encode_diffusion(&self, g: &mut Graph, ops: &HypergraphOperators) -> Result<Var> {
        let mut state = self.init_diffusion.unwrap_or(self.init_social);
        for iv in &ops.intervals {
            let x0 = g.gather_rows(state, &iv.users)?;
            let mut x = x0;
            for layer in &self.hgnn {
                x = hgnn_layer(g, layer, iv, x)?;
            }
            let both = g.concat(&[x0, x], 1)?;
            let logit = self.gate.forward(g, both)?;
            let keep = g.sigmoid(logit)?;
            let neg = g.scale(keep, -1.0)?;
            let update = g.offset(neg, 1.0)?;
            let kept = g.scale_rows(x0, keep)?;
            let moved = g.scale_rows(x, update)?;
            let fused = g.add(kept, moved)?;
            state = g.scatter_rows(state, fused, &iv.users)?;
        }
        Ok(state)
    }

    /// Both tables with the mask rows appended.
    pub fn tables(&self, g: &mut Graph, graph: &SocialGraph, ops: &HypergraphOperators) -> Result<UserTables> {
        let xs = self.encode_social(g, graph)?;
        let xd = self.encode_diffusion(g, ops)?;
        Ok(UserTables {
            social: g.concat(&[xs, self.mask_social], 0)?,
            diffusion: g.concat(&[xd, self.mask_diffusion], 0)?,
        })
    }
}

/// `m_j = σ(mean_{i∈e_j} x_i·W_u)`, then `x_i = σ(mean_{j∋i} m_j·W_e)`, σ = ReLU.
pub fn hgnn_layer(g: &mut Graph, layer: &HgnnLayerVars, iv: &IntervalOperator, x: Var) -> Result<Var> {
    let xw = g.matmul(x, layer.w_node)?;
    let edge_in = g.spmm(&iv.node_to_edge, xw)?;
    let messages = g.relu(edge_in)?;
    let mw = g.matmul(messages, layer.w_edge)?;
    let node_in = g.spmm(&iv.edge_to_node, mw)?;
    g.relu(node_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cascade, Event};
    use crate::rng;

    fn hypergraph(cascades: &[&[(usize, f64)]], t: usize) -> DiffusionHypergraphs {
        let cs: Vec<Cascade> = cascades
            .iter()
            .enumerate()
            .map(|(i, ev)| {
                Cascade::new(
                    alloc::format!("c{i}"),
                    ev.iter().map(|&(user, time)| Event { user, time }).collect(),
                )
                .unwrap()
            })
            .collect();
        DiffusionHypergraphs::build(&cs, t).unwrap()
    }

    #[test]
    fn single_node_identity_gcn() {
        let graph = SocialGraph::new(1, &[], false).unwrap();
        let mut params = UserRepParams::new(1, 3, 1, 1, false, 0.1, &mut rng::seeded(0));
        params.gcn[0] = Linear {
            weight: Tensor::identity(3),
            bias: Tensor::zeros(&[1, 3]),
        };
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let xs = vars.encode_social(&mut g, &graph).unwrap();
        assert_eq!(g.value(xs), &params.init_social);
    }

    #[test]
    fn symmetric_pair_gets_identical_rows() {
        let graph = SocialGraph::new(2, &[(0, 1)], false).unwrap();
        let mut params = UserRepParams::new(2, 4, 2, 1, false, 0.1, &mut rng::seeded(3));
        let row = params.init_social.row(0).to_vec();
        params.init_social = Tensor::new(&[2, 4], [row.clone(), row].concat()).unwrap();
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let xs = vars.encode_social(&mut g, &graph).unwrap();
        let v = g.value(xs);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn hyperedge_message_hand_value() {
        let hg = hypergraph(&[&[(0, 0.0), (1, 0.0)]], 1);
        let ops = HypergraphOperators::new(&hg).unwrap();
        let layer = HgnnLayer {
            w_node: Tensor::identity(2),
            w_edge: Tensor::identity(2),
        };
        let mut g = Graph::new();
        let lv = layer.bind(&mut g, false);
        let x = g.constant(Tensor::matrix(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let xw = g.matmul(x, lv.w_node).unwrap();
        let e = g.spmm(&ops.intervals[0].node_to_edge, xw).unwrap();
        let m = g.relu(e).unwrap();
        assert_eq!(g.value(m).data(), &[0.5, 0.5]);
    }

    #[test]
    fn saturated_gate_keeps_initial_state() {
        let hg = hypergraph(&[&[(0, 0.0), (1, 1.0), (2, 2.0)], &[(2, 3.0), (3, 4.0)]], 3);
        let ops = HypergraphOperators::new(&hg).unwrap();
        let mut params = UserRepParams::new(5, 4, 2, 1, false, 0.1, &mut rng::seeded(1));
        params.gate.bias = Tensor::full(&[1, 1], 60.0);
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let xd = vars.encode_diffusion(&mut g, &ops).unwrap();
        assert_eq!(g.value(xd), &params.init_social);
    }

    #[test]
    fn inactive_users_carry_forward() {
        let hg = hypergraph(&[&[(0, 0.0), (1, 0.5)], &[(2, 9.0), (3, 10.0)]], 2);
        let ops = HypergraphOperators::new(&hg).unwrap();
        let params = UserRepParams::new(6, 3, 2, 1, false, 0.1, &mut rng::seeded(2));
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let xd = vars.encode_diffusion(&mut g, &ops).unwrap();
        let v = g.value(xd);
        for u in [4, 5] {
            assert_eq!(v.row(u), params.init_social.row(u));
        }
        assert_ne!(v.row(0), params.init_social.row(0));
    }

    #[test]
    fn tables_append_mask_row() {
        let graph = SocialGraph::new(3, &[(0, 1)], false).unwrap();
        let hg = hypergraph(&[&[(0, 0.0), (2, 1.0)]], 2);
        let ops = HypergraphOperators::new(&hg).unwrap();
        let params = UserRepParams::new(3, 2, 2, 1, false, 0.1, &mut rng::seeded(4));
        let t = params.embed(&graph, &ops).unwrap();
        assert_eq!(t.social.shape(), &[4, 2]);
        assert_eq!(t.mask_index(), 3);
        assert_eq!(t.diffusion.row(3), params.mask_diffusion.data());
    }
}
