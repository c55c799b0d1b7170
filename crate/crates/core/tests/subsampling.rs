use msdscope::estimator::{select_rings, subsample_lags, subsample_q};
use proptest::prelude::*;

proptest! {
    #[test]
    fn lag_schedule_spans_the_record(n in 3usize..3000, count in 2usize..12) {
        let lags = subsample_lags(n, count).unwrap();
        prop_assert_eq!(lags[0], 1);
        prop_assert_eq!(*lags.last().unwrap(), n - 1);
        prop_assert!(lags.len() <= count);
        prop_assert!(lags.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn ring_schedule_stays_in_range(j0 in 1usize..400, ns in 1usize..40, a in 0.5f64..1.0) {
        let rings = subsample_q(j0, ns, a);
        prop_assert!(!rings.is_empty() && rings.len() <= ns);
        prop_assert_eq!(rings[0], 1);
        prop_assert!(rings.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*rings.last().unwrap() <= j0);
    }

    #[test]
    fn selected_count_is_a_valid_ring(amps in prop::collection::vec(0.0f64..10.0, 1..200)) {
        let j0 = select_rings(&amps, 1e-3, 1e-3);
        prop_assert!(j0 >= 1 && j0 <= amps.len());
    }
}
