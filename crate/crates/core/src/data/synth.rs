//! Synthetic benchmark: preferential-attachment follower graph plus
//! independent-cascade diffusion, with an optional distribution shift on
//! the chronologically last cascades.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::cascade::{Cascade, Event, MAX_CASCADE_LENGTH};
use super::graph::SocialGraph;
use crate::error::{Error, Result};
use crate::rng;

/// Attempts per cascade before settling for a lone seed user.
pub const MAX_SEED_RETRIES: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    /// Edges added per arriving node.
    pub pa_edges_per_node: usize,
    pub n_cascades: usize,
    /// Per-edge activation probability.
    pub activation_p: f64,
    /// Fraction of cascades (the latest ones) drawn under the shifted regime.
    pub shift_fraction: f64,
    /// Multiplier on `activation_p` for shifted cascades.
    pub shift_factor: f64,
    /// Number of highest-degree users that never activate in shifted cascades.
    pub hub_dropout_k: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            pa_edges_per_node: 2,
            n_cascades: 300,
            activation_p: 0.15,
            shift_fraction: 0.0,
            shift_factor: 1.0,
            hub_dropout_k: 0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(format!("synthetic config: {m}")));
        if self.n_users < 2 {
            return fail("n_users must be at least 2");
        }
        if self.pa_edges_per_node == 0 {
            return fail("pa_edges_per_node must be positive");
        }
        if self.n_cascades == 0 {
            return fail("n_cascades must be positive");
        }
        if !(0.0..=1.0).contains(&self.activation_p) {
            return fail("activation_p must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.shift_fraction) {
            return fail("shift_fraction must lie in [0, 1]");
        }
        if !(self.shift_factor >= 0.0 && self.shift_factor.is_finite()) {
            return fail("shift_factor must be finite and non-negative");
        }
        if self.hub_dropout_k >= self.n_users {
            return fail("hub_dropout_k must be below n_users");
        }
        Ok(())
    }

    /// Number of trailing cascades drawn under the shifted regime.
    pub fn shifted_count(&self) -> usize {
        (libm::floor(self.shift_fraction * self.n_cascades as f64 + 1e-9) as usize)
            .min(self.n_cascades)
    }
}

/// Barabási–Albert style graph: a clique on the first `m + 1` nodes, then
/// each new node links to `m` distinct existing nodes chosen with
/// probability proportional to degree.
pub fn preferential_attachment<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let core = (m + 1).min(n);
    let mut edges = Vec::new();
    let mut endpoints = Vec::new();
    for u in 0..core {
        for v in (u + 1)..core {
            edges.push((u, v));
            endpoints.extend([u, v]);
        }
    }
    for v in core..n {
        let mut targets: Vec<usize> = Vec::with_capacity(m);
        while targets.len() < m.min(v) {
            let t = endpoints[rng.random_range(0..endpoints.len())];
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for t in targets {
            edges.push((t, v));
            endpoints.extend([t, v]);
        }
    }
    edges
}

/// Top-`k` users by degree, ties broken by smaller id.
pub fn hubs(graph: &SocialGraph, k: usize) -> Vec<usize> {
    let deg = graph.degrees();
    let mut order: Vec<usize> = (0..graph.num_users()).collect();
    order.sort_by(|&a, &b| deg[b].cmp(&deg[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

struct Regime<'a> {
    p: f64,
    blocked: &'a [bool],
}

fn spread<R: Rng + ?Sized>(
    neighbors: &[Vec<usize>],
    seed_user: usize,
    regime: &Regime<'_>,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let mut active = vec![false; neighbors.len()];
    active[seed_user] = true;
    let mut reached = vec![(seed_user, 0usize)];
    let mut queue = VecDeque::from([(seed_user, 0usize)]);
    while let Some((u, depth)) = queue.pop_front() {
        for &v in &neighbors[u] {
            if active[v] || regime.blocked[v] {
                continue;
            }
            if rng.random_bool(regime.p) {
                active[v] = true;
                reached.push((v, depth + 1));
                queue.push_back((v, depth + 1));
                if reached.len() == MAX_CASCADE_LENGTH {
                    return reached;
                }
            }
        }
    }
    reached
}

/// Draws the graph and cascades described by `config`, deterministically
/// in `config.seed`. Cascade `k` starts at time `k`; each adopter's
/// timestamp is its BFS depth from the seed user plus uniform jitter in
/// `[0, 0.5)`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<(SocialGraph, Vec<Cascade>)> {
    config.validate()?;
    let mut graph_rng = rng::derived(config.seed, "synth-graph", 0);
    let edges = preferential_attachment(config.n_users, config.pa_edges_per_node, &mut graph_rng);
    let graph = SocialGraph::new(config.n_users, &edges, false)?;
    let mut neighbors = graph.neighbors();
    for list in &mut neighbors {
        list.sort_unstable();
    }

    let open = vec![false; config.n_users];
    let mut dropped = vec![false; config.n_users];
    for h in hubs(&graph, config.hub_dropout_k) {
        dropped[h] = true;
    }
    let base = Regime {
        p: config.activation_p,
        blocked: &open,
    };
    let shifted = Regime {
        p: (config.activation_p * config.shift_factor).min(1.0),
        blocked: &dropped,
    };
    let eligible_shifted: Vec<usize> = (0..config.n_users).filter(|&u| !dropped[u]).collect();
    let first_shifted = config.n_cascades - config.shifted_count();

    let mut cascades = Vec::with_capacity(config.n_cascades);
    for k in 0..config.n_cascades {
        let mut rng = rng::derived(config.seed, "synth-cascade", k as u64);
        let (regime, pool): (&Regime<'_>, Option<&[usize]>) = if k >= first_shifted {
            (&shifted, Some(&eligible_shifted))
        } else {
            (&base, None)
        };
        let mut reached = Vec::new();
        for _ in 0..MAX_SEED_RETRIES {
            let seed_user = match pool {
                Some(p) => p[rng.random_range(0..p.len())],
                None => rng.random_range(0..config.n_users),
            };
            reached = spread(&neighbors, seed_user, regime, &mut rng);
            if reached.len() > 1 {
                break;
            }
        }
        let start = k as f64;
        let mut events: Vec<Event> = reached
            .iter()
            .enumerate()
            .map(|(i, &(user, depth))| {
                let jitter = if i == 0 { 0.0 } else { rng.random_range(0.0..0.5) };
                Event {
                    user,
                    time: start + depth as f64 + jitter,
                }
            })
            .collect();
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        cascades.push(Cascade::new(format!("s{k:05}"), events)?);
    }
    Ok((graph, cascades))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(p: f64) -> SynthConfig {
        SynthConfig {
            n_users: 40,
            n_cascades: 20,
            activation_p: p,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_activation_gives_singletons() {
        let (_, cs) = generate_synthetic(&small(0.0)).unwrap();
        assert!(cs.iter().all(|c| c.len() == 1));
    }

    #[test]
    fn certain_activation_covers_component() {
        let (g, cs) = generate_synthetic(&small(1.0)).unwrap();
        assert_eq!(g.num_users(), 40);
        assert!(cs.iter().all(|c| c.len() == 40));
    }

    #[test]
    fn graph_edge_count() {
        let mut r = rng::seeded(1);
        let e = preferential_attachment(50, 2, &mut r);
        // Triangle on 3 nodes, then 2 edges for each of the other 47.
        assert_eq!(e.len(), 3 + 2 * 47);
    }

    #[test]
    fn shifted_cascades_avoid_hubs() {
        let cfg = SynthConfig {
            shift_fraction: 0.5,
            shift_factor: 2.0,
            hub_dropout_k: 5,
            ..small(0.4)
        };
        let (g, cs) = generate_synthetic(&cfg).unwrap();
        let hub_list = hubs(&g, 5);
        for c in &cs[10..] {
            assert!(c.users().iter().all(|u| !hub_list.contains(u)));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(generate_synthetic(&SynthConfig {
            activation_p: 1.5,
            ..SynthConfig::default()
        })
        .is_err());
    }
}
