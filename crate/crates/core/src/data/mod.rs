//! Cascades, the social graph, temporal diffusion hypergraphs, the
//! chronological split and the synthetic generator.

mod cascade;
mod graph;
mod hypergraph;
mod split;
pub mod synth;

use alloc::vec::Vec;

pub use cascade::{observed_len, Cascade, CleanupReport, Event, MAX_CASCADE_LENGTH};
pub use graph::SocialGraph;
pub use hypergraph::{DiffusionHypergraphs, Interval};
pub use split::{chronological_split, split_sizes, DatasetSplit};
pub use synth::{generate_synthetic, SynthConfig};

/// A social graph plus cascades over densely indexed users.
///
/// `user_labels[i]` is the external id of user `i`; labels are strictly
/// increasing, so re-indexing a written dataset reproduces the same ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graph: SocialGraph,
    pub cascades: Vec<Cascade>,
    pub user_labels: Vec<u64>,
}

impl Dataset {
    /// Dataset whose labels equal the dense ids.
    pub fn identity_labeled(graph: SocialGraph, cascades: Vec<Cascade>) -> Self {
        let user_labels = (0..graph.num_users() as u64).collect();
        Self {
            graph,
            cascades,
            user_labels,
        }
    }

    pub fn num_users(&self) -> usize {
        self.graph.num_users()
    }
}
