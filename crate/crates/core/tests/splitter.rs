use std::collections::HashMap;

use melafuse::splitter::*;
use melafuse::Error;
use proptest::prelude::*;

fn arb_groups() -> impl Strategy<Value = (Vec<String>, usize)> {
    (proptest::collection::vec(0u32..40, 1..150), 2usize..8)
        .prop_map(|(ids, k)| (ids.into_iter().map(|g| format!("p{g}")).collect(), k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn group_kfold_invariants((ids, k) in arb_groups()) {
        let distinct = ids.iter().collect::<std::collections::HashSet<_>>().len();
        match group_kfold(&ids, k) {
            Err(Error::InsufficientGroups { groups, folds }) => {
                prop_assert!(distinct < k);
                prop_assert_eq!((groups, folds), (distinct, k));
            }
            Err(e) => prop_assert!(false, "unexpected error {e}"),
            Ok(a) => {
                prop_assert!(distinct >= k);
                prop_assert_eq!(&a, &group_kfold(&ids, k).unwrap());
                let mut seen = vec![0usize; ids.len()];
                for f in 0..k {
                    let (train, val) = fold_iter(&a, f).unwrap();
                    prop_assert_eq!(train.len() + val.len(), ids.len());
                    for &i in &val {
                        seen[i] += 1;
                    }
                    let val_groups: std::collections::HashSet<_> = val.iter().map(|&i| &ids[i]).collect();
                    prop_assert!(train.iter().all(|&i| !val_groups.contains(&ids[i])));
                }
                prop_assert!(seen.iter().all(|&c| c == 1));
                let mut sizes: HashMap<&String, usize> = HashMap::new();
                for g in &ids {
                    *sizes.entry(g).or_default() += 1;
                }
                let largest = *sizes.values().max().unwrap();
                let fs = a.fold_sizes();
                prop_assert!(fs.iter().max().unwrap() - fs.iter().min().unwrap() <= largest);
            }
        }
    }
}
