mod common;

use std::collections::BTreeSet;

use common::stream;
use pkdistill_core::teacher::filter_pseudo_labels;
use proptest::prelude::*;

const TAUS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn higher_threshold_keeps_a_subset(occ in prop::collection::vec(0.0f32..=1.0, 24)) {
        let patches = stream(21, &["A1", "A2"], 3, 4);
        let post: Vec<[f32; 2]> = occ.iter().map(|&p| [p, 1.0 - p]).collect();
        let mut prev: Option<(BTreeSet<(String, String)>, usize, usize)> = None;
        for tau in TAUS {
            let set = filter_pseudo_labels(&patches, &post, tau).unwrap();
            let keys: BTreeSet<_> = set.labels.iter().map(|l| (l.image_path.clone(), l.spot_id.clone())).collect();
            let wrong = set.stats.wrong.unwrap();
            prop_assert_eq!(keys.len(), set.stats.used);
            prop_assert_eq!(set.stats.candidates, patches.len());
            if let Some((pk, pu, pw)) = &prev {
                prop_assert!(keys.is_subset(pk));
                prop_assert!(set.stats.used <= *pu);
                prop_assert!(wrong <= *pw);
            }
            prev = Some((keys, set.stats.used, wrong));
        }
    }
}
