use std::collections::HashSet;

use keygate_core::keying::{combination_count, crack_time, enumerate_removals, parse_key, FuserKey};
use proptest::prelude::*;

proptest! {
    #[test]
    fn hex_round_trip(bytes in any::<[u8; 16]>(), upper in any::<bool>()) {
        let key = FuserKey::from_bytes(bytes);
        let hex = if upper { key.to_hex().to_uppercase() } else { key.to_hex() };
        prop_assert_eq!(*parse_key(&hex).unwrap().as_bytes(), bytes);
    }

    #[test]
    fn flipping_a_bit_changes_one_bit(bytes in any::<[u8; 16]>(), i in 0usize..128) {
        let key = FuserKey::from_bytes(bytes);
        let flipped = key.with_flipped(i);
        prop_assert_eq!(key.hamming(&flipped), 1);
        prop_assert_ne!(key.bit(i), flipped.bit(i));
    }

    #[test]
    fn wrong_length_rejected(s in "[0-9a-f]{0,40}") {
        prop_assume!(s.len() != 32);
        prop_assert!(parse_key(&s).is_err());
    }

    #[test]
    fn crack_time_is_linear(m in 0i64..12, n in 0i64..12, t in 0.001f64..10.0) {
        let est = crack_time(m, n, t).unwrap();
        let count = combination_count(m, n).unwrap();
        prop_assert_eq!(est.combination_count, count);
        prop_assert!((est.t_crack - count as f64 * t).abs() <= 1e-9 * est.t_crack.max(1.0));
    }
}

#[test]
fn enumeration_matches_count_up_to_eight() {
    for m in 0..=8 {
        for n in 0..=8 {
            let listed = enumerate_removals(m, n).unwrap();
            let unique: HashSet<_> = listed.iter().collect();
            assert_eq!(listed.len() as u64, combination_count(m, n).unwrap(), "m={m} n={n}");
            assert_eq!(unique.len(), listed.len(), "duplicates for m={m} n={n}");
            let mid_pairs = listed.iter().filter(|h| h.mid_survivors.is_some()).count() as i64;
            assert_eq!(mid_pairs, (m + 2) * (m + 1) / 2);
            assert!(listed.iter().all(|h| h.mid_survivors.is_some() != h.up_survivors.is_some()));
        }
    }
}

#[test]
fn negative_counts_rejected() {
    assert!(combination_count(-1, 0).is_err());
    assert!(enumerate_removals(0, -2).is_err());
}
