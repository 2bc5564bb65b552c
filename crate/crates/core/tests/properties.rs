use difftt_core::data::{chronological_split, split_sizes, Cascade, Event};
use difftt_core::metrics::{hits_at_k, map_at_k, rank_of};
use difftt_core::model::auxiliary::{augment, byol_value};
use difftt_core::{Csr, Graph, Tensor};
use proptest::prelude::*;

fn cascade(id: usize, start: f64, users: &[usize]) -> Cascade {
    let events = users
        .iter()
        .enumerate()
        .map(|(i, &user)| Event {
            user,
            time: start + i as f64,
        })
        .collect();
    Cascade::new(format!("c{id}"), events).unwrap()
}

fn distinct_users(max: usize) -> impl Strategy<Value = Vec<usize>> {
    proptest::sample::subsequence((0..max).collect::<Vec<_>>(), 1..max).prop_shuffle()
}

proptest! {
    #[test]
    fn byol_stays_in_range(
        r in proptest::collection::vec(-100.0f64..100.0, 1..16),
        seed in any::<u64>(),
    ) {
        prop_assume!(r.iter().any(|&x| x != 0.0));
        let z: Vec<f64> = r.iter().enumerate().map(|(i, x)| (x * 1.7 + (seed % 7) as f64 - i as f64).sin()).collect();
        prop_assume!(z.iter().any(|&x| x != 0.0));
        let v = byol_value(&r, &z).unwrap();
        prop_assert!((0.0..=4.0 + 1e-12).contains(&v));
        prop_assert!(byol_value(&r, &r).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rank_counts_users_ahead(
        scores in proptest::collection::vec(0u8..4, 1..12),
        truth_pick in any::<proptest::sample::Index>(),
        mask in any::<u16>(),
    ) {
        let truth = truth_pick.index(scores.len());
        let excluded: Vec<usize> = (0..scores.len()).filter(|&u| u != truth && (mask >> u) & 1 == 1).collect();
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let ahead = (0..scores.len())
            .filter(|u| !excluded.contains(u))
            .filter(|&u| scores[u] > scores[truth] || (scores[u] == scores[truth] && u < truth))
            .count();
        prop_assert_eq!(rank_of(&s, truth, &excluded), Some(ahead + 1));
        prop_assert_eq!(rank_of(&s, truth, &[truth]), None);
    }

    #[test]
    fn hits_bound_map(ranks in proptest::collection::vec(1usize..30, 1..40), k in 1usize..30) {
        let (h, m) = (hits_at_k(&ranks, k), map_at_k(&ranks, k));
        prop_assert!((0.0..=1.0).contains(&h) && (0.0..=1.0).contains(&m));
        prop_assert!(m <= h + 1e-15);
        prop_assert!(hits_at_k(&ranks, k + 1) >= h);
    }

    #[test]
    fn augmented_views_keep_length_and_users(users in distinct_users(20), seed in any::<u64>()) {
        let pair = augment(&users, 20, seed).unwrap();
        prop_assert_eq!(pair.masked.len(), users.len());
        for (m, u) in pair.masked.iter().zip(&users) {
            prop_assert!(m == u || *m == 20);
        }
        let (mut a, mut b) = (pair.shuffled.clone(), users.clone());
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        if users.len() >= 2 {
            prop_assert_ne!(&pair.shuffled, &users);
        }
        prop_assert_eq!(augment(&users, 20, seed).unwrap(), pair);
    }

    #[test]
    fn split_is_chronological_partition(n in 3usize..60, starts in proptest::collection::vec(0.0f64..1000.0, 60)) {
        let cs: Vec<Cascade> = (0..n).map(|i| cascade(i, starts[i], &[i % 7, 7 + i % 5])).collect();
        let split = chronological_split(&cs, (0.8, 0.1, 0.1)).unwrap();
        let (a, b, c) = split_sizes(n, (0.8, 0.1, 0.1)).unwrap();
        prop_assert_eq!((split.train.len(), split.valid.len(), split.test.len()), (a, b, c));
        prop_assert!(a > 0 && b > 0 && c > 0);
        let latest_train = split.train.iter().map(Cascade::start_time).fold(f64::MIN, f64::max);
        let earliest_rest = split.valid.iter().chain(&split.test).map(Cascade::start_time).fold(f64::MAX, f64::min);
        prop_assert!(latest_train <= earliest_rest);
    }

    #[test]
    fn spmm_matches_dense(
        entries in proptest::collection::btree_map((0usize..5, 0usize..6), -2.0f64..2.0, 0..20),
        x in proptest::collection::vec(-3.0f64..3.0, 18),
    ) {
        let trip: Vec<(usize, usize, f64)> = entries.into_iter().map(|((r, c), v)| (r, c, v)).collect();
        let csr = std::sync::Arc::new(Csr::from_triplets(5, 6, &trip).unwrap());
        let dense = csr.to_dense();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::matrix(6, 3, &x).unwrap());
        let y = g.spmm(&csr, xv).unwrap();
        let y = g.value(y);
        for r in 0..5 {
            for c in 0..3 {
                let want: f64 = (0..6).map(|k| dense[r * 6 + k] * x[k * 3 + c]).sum();
                prop_assert!((y.get2(r, c) - want).abs() < 1e-12);
            }
        }
    }
}
