use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Longest event sequence fed to the model.
pub const MAX_CASCADE_LENGTH: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub user: usize,
    pub time: f64,
}

/// A time-ordered sequence of distinct adopting users.
#[derive(Clone, Debug, PartialEq)]
pub struct Cascade {
    id: String,
    events: Vec<Event>,
    final_size: usize,
}

/// What [`Cascade::from_raw`] had to clean up.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CleanupReport {
    /// Positions (in the raw list) of repeated users that were dropped.
    pub dropped_duplicates: Vec<usize>,
    /// Events beyond the maximum length that were cut.
    pub truncated: usize,
}

impl Cascade {
    /// Strict constructor: non-empty, non-decreasing finite timestamps,
    /// distinct users, at most [`MAX_CASCADE_LENGTH`] events.
    pub fn new(id: impl Into<String>, events: Vec<Event>) -> Result<Self> {
        let final_size = events.len();
        Self::with_final_size(id, events, final_size)
    }

    pub fn with_final_size(
        id: impl Into<String>,
        events: Vec<Event>,
        final_size: usize,
    ) -> Result<Self> {
        let id = id.into();
        if events.is_empty() {
            return Err(Error::InvalidData(format!("cascade {id}: no events")));
        }
        if events.len() > MAX_CASCADE_LENGTH {
            return Err(Error::InvalidData(format!(
                "cascade {id}: {} events exceeds maximum {MAX_CASCADE_LENGTH}",
                events.len()
            )));
        }
        if final_size < events.len() {
            return Err(Error::InvalidData(format!(
                "cascade {id}: final size {final_size} below observed length {}",
                events.len()
            )));
        }
        check_times(&id, &events)?;
        let mut users: Vec<usize> = events.iter().map(|e| e.user).collect();
        users.sort_unstable();
        if users.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidData(format!("cascade {id}: duplicate user")));
        }
        Ok(Self {
            id,
            events,
            final_size,
        })
    }

    /// Lenient constructor for raw logs: keeps the first occurrence of each
    /// user and cuts to [`MAX_CASCADE_LENGTH`]. The final size counts every
    /// distinct user, including cut ones. Timestamps must still be
    /// non-decreasing.
    pub fn from_raw(id: impl Into<String>, raw: &[Event]) -> Result<(Self, CleanupReport)> {
        let id = id.into();
        check_times(&id, raw)?;
        let mut report = CleanupReport::default();
        let mut seen = alloc::collections::BTreeSet::new();
        let mut events = Vec::with_capacity(raw.len());
        for (pos, e) in raw.iter().enumerate() {
            if seen.insert(e.user) {
                events.push(*e);
            } else {
                report.dropped_duplicates.push(pos);
            }
        }
        let final_size = events.len();
        if events.len() > MAX_CASCADE_LENGTH {
            report.truncated = events.len() - MAX_CASCADE_LENGTH;
            events.truncate(MAX_CASCADE_LENGTH);
        }
        Ok((Self::with_final_size(id, events, final_size)?, report))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn users(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.user).collect()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Popularity label.
    pub fn final_size(&self) -> usize {
        self.final_size
    }

    pub fn start_time(&self) -> f64 {
        self.events[0].time
    }

    /// Length of the observed prefix at observation fraction `rho`:
    /// `floor(rho·len)` clamped to `[2, len − 1]`, and 1 for cascades too
    /// short to have both a two-event prefix and a suffix.
    pub fn observed_len(&self, rho: f64) -> usize {
        observed_len(self.len(), rho)
    }
}

pub fn observed_len(len: usize, rho: f64) -> usize {
    if len <= 2 {
        return 1;
    }
    let raw = libm::floor(rho * len as f64) as usize;
    raw.clamp(2, len - 1)
}

fn check_times(id: &str, events: &[Event]) -> Result<()> {
    for (i, e) in events.iter().enumerate() {
        if !e.time.is_finite() || e.time < 0.0 {
            return Err(Error::InvalidData(format!(
                "cascade {id}: invalid timestamp {} at event {i}",
                e.time
            )));
        }
        if i > 0 && events[i - 1].time > e.time {
            return Err(Error::InvalidData(format!(
                "cascade {id}: non-monotone timestamps at event {i}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ev(user: usize, time: f64) -> Event {
        Event { user, time }
    }

    #[test]
    fn non_monotone_rejected() {
        let err = Cascade::new("c", vec![ev(5, 2.0), ev(6, 1.0)]).unwrap_err();
        assert!(format!("{err}").contains("non-monotone timestamps"));
    }

    #[test]
    fn raw_drops_repeats_keeping_first() {
        let (c, rep) = Cascade::from_raw("c", &[ev(1, 0.0), ev(2, 1.0), ev(1, 2.0)]).unwrap();
        assert_eq!(c.users(), vec![1, 2]);
        assert_eq!(rep.dropped_duplicates, vec![2]);
        assert_eq!(c.final_size(), 2);
    }

    #[test]
    fn raw_truncates_but_counts_final_size() {
        let raw: Vec<Event> = (0..250).map(|u| ev(u, u as f64)).collect();
        let (c, rep) = Cascade::from_raw("long", &raw).unwrap();
        assert_eq!(c.len(), MAX_CASCADE_LENGTH);
        assert_eq!(c.final_size(), 250);
        assert_eq!(rep.truncated, 50);
    }

    #[test]
    fn strict_rejects_duplicates_and_empty() {
        assert!(Cascade::new("c", vec![ev(1, 0.0), ev(1, 1.0)]).is_err());
        assert!(Cascade::new("c", vec![]).is_err());
    }

    #[test]
    fn observed_prefix_bounds() {
        assert_eq!(observed_len(1, 0.5), 1);
        assert_eq!(observed_len(2, 0.5), 1);
        assert_eq!(observed_len(3, 0.5), 2);
        assert_eq!(observed_len(10, 0.5), 5);
        assert_eq!(observed_len(10, 0.99), 9);
        assert_eq!(observed_len(10, 0.01), 2);
    }
}
