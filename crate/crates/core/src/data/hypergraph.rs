use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::cascade::Cascade;
use crate::error::{Error, Result};

/// Users and hyperedges active in one time interval.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Interval {
    /// Sorted, distinct.
    pub users: Vec<usize>,
    /// One hyperedge per cascade with at least one event in the interval;
    /// members in event order.
    pub hyperedges: Vec<Vec<usize>>,
    /// Index into the training cascade list for each hyperedge.
    pub sources: Vec<usize>,
}

/// Sequence of per-interval diffusion hypergraphs over the training period.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionHypergraphs {
    start: f64,
    end: f64,
    boundaries: Vec<f64>,
    intervals: Vec<Interval>,
}

impl DiffusionHypergraphs {
    /// Equal-width partition of `[min_ts, max_ts]` into `num_intervals`
    /// intervals, `[b_k, b_{k+1})` except the last, which is closed.
    pub fn build(train: &[Cascade], num_intervals: usize) -> Result<Self> {
        if num_intervals == 0 {
            return Err(Error::invalid("interval count must be at least 1"));
        }
        let times = train.iter().flat_map(|c| c.events().iter().map(|e| e.time));
        let (start, end) = times.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
            (lo.min(t), hi.max(t))
        });
        if !start.is_finite() {
            return Err(Error::invalid("no training events to build hypergraphs from"));
        }
        let width = (end - start) / num_intervals as f64;
        let boundaries: Vec<f64> = (1..num_intervals)
            .map(|k| start + k as f64 * width)
            .collect();

        let mut intervals = vec![Interval::default(); num_intervals];
        let mut user_sets = vec![BTreeSet::new(); num_intervals];
        for (ci, cascade) in train.iter().enumerate() {
            let mut per_interval: Vec<Vec<usize>> = vec![Vec::new(); num_intervals];
            for e in cascade.events() {
                let k = interval_of(&boundaries, e.time);
                per_interval[k].push(e.user);
            }
            for (k, members) in per_interval.into_iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                user_sets[k].extend(members.iter().copied());
                intervals[k].hyperedges.push(members);
                intervals[k].sources.push(ci);
            }
        }
        for (iv, users) in intervals.iter_mut().zip(user_sets) {
            iv.users = users.into_iter().collect();
        }
        Ok(Self {
            start,
            end,
            boundaries,
            intervals,
        })
    }

    pub fn num_intervals(&self) -> usize {
        self.intervals.len()
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    /// Interior boundaries `b_1 < … < b_{T−1}`.
    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn time_range(&self) -> (f64, f64) {
        (self.start, self.end)
    }

    /// Interval containing timestamp `t` (clamped to the first/last).
    pub fn interval_of(&self, t: f64) -> usize {
        interval_of(&self.boundaries, t)
    }

    pub fn check_users(&self, num_users: usize) -> Result<()> {
        for iv in &self.intervals {
            if let Some(&u) = iv.users.last() {
                if u >= num_users {
                    return Err(Error::InvalidData(format!(
                        "hypergraph user {u} outside 0..{num_users}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn interval_of(boundaries: &[f64], t: f64) -> usize {
    boundaries.partition_point(|&b| b <= t)
}
