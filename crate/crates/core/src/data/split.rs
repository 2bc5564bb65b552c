use alloc::format;
use alloc::vec::Vec;

use super::cascade::Cascade;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Cascade>,
    pub valid: Vec<Cascade>,
    pub test: Vec<Cascade>,
    pub fractions: (f64, f64, f64),
}

/// Split sizes for `n` cascades: floor of each fraction, at least one
/// cascade in each non-empty split, remainder to train.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (tr, va, te) = fractions;
    if [tr, va, te].iter().any(|f| !(0.0..=1.0).contains(f)) || libm::fabs(tr + va + te - 1.0) > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 cascades to split, got {n}")));
    }
    let part = |f: f64| {
        if f == 0.0 {
            0
        } else {
            (libm::floor(f * n as f64 + 1e-9) as usize).max(1)
        }
    };
    let (valid, test) = (part(va), part(te));
    if valid + test >= n {
        return Err(Error::invalid(format!(
            "{n} cascades leave no training data under fractions {fractions:?}"
        )));
    }
    Ok((n - valid - test, valid, test))
}

/// Sorts by start time (ties by cascade id) and cuts contiguous slices.
pub fn chronological_split(cascades: &[Cascade], fractions: (f64, f64, f64)) -> Result<DatasetSplit> {
    let (n_train, n_valid, _) = split_sizes(cascades.len(), fractions)?;
    let mut sorted = cascades.to_vec();
    sorted.sort_by(|a, b| {
        a.start_time()
            .total_cmp(&b.start_time())
            .then_with(|| a.id().cmp(b.id()))
    });
    let test = sorted.split_off(n_train + n_valid);
    let valid = sorted.split_off(n_train);
    Ok(DatasetSplit {
        train: sorted,
        valid,
        test,
        fractions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::cascade::Event;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn sizes_floor_with_remainder_to_train() {
        assert_eq!(split_sizes(10, (0.8, 0.1, 0.1)).unwrap(), (8, 1, 1));
        // floor(0.1·679) = 67 twice, the remaining 545 go to train.
        assert_eq!(split_sizes(679, (0.8, 0.1, 0.1)).unwrap(), (545, 67, 67));
    }

    #[test]
    fn too_few_cascades() {
        assert!(split_sizes(2, (0.8, 0.1, 0.1)).is_err());
        assert!(split_sizes(10, (0.8, 0.1, 0.2)).is_err());
    }

    #[test]
    fn ties_ordered_by_id() {
        let mk = |id: &str, t: f64| Cascade::new(id, vec![Event { user: 0, time: t }]).unwrap();
        let cs = vec![mk("c", 1.0), mk("b", 0.0), mk("a", 1.0), mk("d", 2.0)];
        let split = chronological_split(&cs, (0.5, 0.25, 0.25)).unwrap();
        let ids: Vec<_> = split.train.iter().map(|c| c.id().to_string()).collect();
        assert_eq!(ids, vec!["b", "a"]);
        assert_eq!(split.valid[0].id(), "c");
        assert_eq!(split.test[0].id(), "d");
    }
}
