//! Ranking and popularity metrics, per-cascade reports and the paired
//! ΔMSLE diagnostic.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 3] = [10, 50, 100];

/// 1-based rank of `truth` among users not in `excluded`, ties broken by
/// ascending id. `None` if `truth` itself is excluded.
pub fn rank_of(scores: &[f64], truth: usize, excluded: &[usize]) -> Option<usize> {
    if truth >= scores.len() || excluded.contains(&truth) {
        return None;
    }
    let s = scores[truth];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(u, &v)| (v > s || (v == s && u < truth)) && !excluded.contains(&u))
        .count();
    Some(ahead + 1)
}

/// Fraction of ranks `≤ k`.
pub fn hits_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Mean of `1/rank` for ranks `≤ k`, zero otherwise.
pub fn map_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks
        .iter()
        .map(|&r| if r <= k { 1.0 / r as f64 } else { 0.0 })
        .sum::<f64>()
        / ranks.len() as f64
}

/// Squared log error for one cascade.
pub fn squared_log_error(pred: f64, truth: f64) -> Result<f64> {
    if !(pred >= 0.0 && truth >= 0.0) {
        return Err(Error::domain("msle", alloc::format!("negative input ({pred}, {truth})")));
    }
    let d = libm::log1p(pred) - libm::log1p(truth);
    Ok(d * d)
}

/// How micro metrics are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Averaging {
    /// Every evaluated position weighs the same.
    #[default]
    Position,
    /// Per-cascade means, then the mean over cascades with any position.
    Cascade,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeRow {
    pub id: String,
    pub truth: f64,
    pub pred: f64,
    pub sq_log_err: f64,
    /// `(position, rank)` for each scored position.
    pub ranks: Vec<(usize, usize)>,
    /// Positions whose true user was masked out.
    pub skipped: usize,
}

impl CascadeRow {
    pub fn new(id: impl Into<String>, truth: f64, pred: f64, ranks: Vec<(usize, usize)>, skipped: usize) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            truth,
            pred,
            sq_log_err: squared_log_error(pred, truth)?,
            ranks,
            skipped,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<CascadeRow>,
    pub msle: f64,
    /// `(k, Hits@k, MAP@k)`.
    pub ranking: Vec<(usize, f64, f64)>,
    pub positions: usize,
    pub averaging: Averaging,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<CascadeRow>, ks: &[usize], averaging: Averaging) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("evaluation report needs at least one cascade"));
        }
        let msle = rows.iter().map(|r| r.sq_log_err).sum::<f64>() / rows.len() as f64;
        let all: Vec<usize> = rows.iter().flat_map(|r| r.ranks.iter().map(|&(_, k)| k)).collect();
        let ranking = ks
            .iter()
            .map(|&k| match averaging {
                Averaging::Position => (k, hits_at_k(&all, k), map_at_k(&all, k)),
                Averaging::Cascade => {
                    let per: Vec<(f64, f64)> = rows
                        .iter()
                        .filter(|r| !r.ranks.is_empty())
                        .map(|r| {
                            let rk: Vec<usize> = r.ranks.iter().map(|&(_, x)| x).collect();
                            (hits_at_k(&rk, k), map_at_k(&rk, k))
                        })
                        .collect();
                    let n = per.len().max(1) as f64;
                    (
                        k,
                        per.iter().map(|p| p.0).sum::<f64>() / n,
                        per.iter().map(|p| p.1).sum::<f64>() / n,
                    )
                }
            })
            .collect();
        Ok(Self {
            positions: all.len(),
            rows,
            msle,
            ranking,
            averaging,
        })
    }

    pub fn hits(&self, k: usize) -> Option<f64> {
        self.ranking.iter().find(|r| r.0 == k).map(|r| r.1)
    }

    pub fn map(&self, k: usize) -> Option<f64> {
        self.ranking.iter().find(|r| r.0 == k).map(|r| r.2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaRow {
    pub id: String,
    pub with: f64,
    pub without: f64,
    /// `with − without`; positive means adaptation hurt.
    pub delta: f64,
}

/// Pairs two reports on the same cascades by id.
pub fn delta_msle(with: &EvalReport, without: &EvalReport) -> Result<Vec<DeltaRow>> {
    if with.rows.len() != without.rows.len() {
        return Err(Error::invalid(alloc::format!(
            "paired reports cover {} and {} cascades",
            with.rows.len(),
            without.rows.len()
        )));
    }
    let mut base: Vec<&CascadeRow> = without.rows.iter().collect();
    base.sort_by(|a, b| a.id.cmp(&b.id));
    with.rows
        .iter()
        .map(|r| {
            let i = base
                .binary_search_by(|b| b.id.as_str().cmp(&r.id))
                .map_err(|_| Error::invalid(alloc::format!("cascade {} missing from baseline report", r.id)))?;
            let b = base[i];
            Ok(DeltaRow {
                id: r.id.clone(),
                with: r.sq_log_err,
                without: b.sq_log_err,
                delta: r.sq_log_err - b.sq_log_err,
            })
        })
        .collect()
}

/// Fraction of cascades whose error grew.
pub fn degradation_ratio(rows: &[DeltaRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.delta > 0.0).count() as f64 / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn reference_ranks() {
        let s = [0.1, 0.2, 0.3, 0.4, 0.5];
        assert_eq!(rank_of(&s, 0, &[]), Some(5));
        assert_eq!(hits_at_k(&[5], 3), 0.0);
        assert_eq!(rank_of(&[1.0; 4], 0, &[]), Some(1));
        assert_eq!(rank_of(&[1.0; 4], 2, &[]), Some(3));
        assert_eq!(rank_of(&s, 0, &[4, 3]), Some(3));
        assert_eq!(rank_of(&s, 1, &[1]), None);
    }

    #[test]
    fn reciprocal_rank_values() {
        assert_eq!(map_at_k(&[1], 10), 1.0);
        assert!((map_at_k(&[3], 10) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(map_at_k(&[11], 10), 0.0);
    }

    #[test]
    fn report_aggregates_and_delta() {
        let rows = vec![
            CascadeRow::new("a", 3.0, 7.0, vec![(1, 1), (2, 4)], 0).unwrap(),
            CascadeRow::new("b", 7.0, 3.0, vec![(1, 2)], 0).unwrap(),
        ];
        let r = EvalReport::from_rows(rows.clone(), &[1, 3], Averaging::Position).unwrap();
        assert!((r.msle - 0.480453).abs() < 1e-6);
        assert!((r.hits(3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.map(3).unwrap() - 0.5).abs() < 1e-15);
        let c = EvalReport::from_rows(rows, &[1], Averaging::Cascade).unwrap();
        assert!((c.hits(1).unwrap() - 0.25).abs() < 1e-15);

        let better = EvalReport::from_rows(
            vec![
                CascadeRow::new("b", 7.0, 7.0, vec![], 0).unwrap(),
                CascadeRow::new("a", 3.0, 8.0, vec![], 0).unwrap(),
            ],
            &[1],
            Averaging::Position,
        )
        .unwrap();
        let d = delta_msle(&better, &r).unwrap();
        let sum: f64 = d.iter().map(|x| x.delta).sum();
        assert!((sum - (better.msle - r.msle) * 2.0).abs() < 1e-12);
        assert_eq!(degradation_ratio(&d), 0.5);
    }
}
