//! Every split is an exact partition of its input, stratified where
//! promised, and reproducible from its random stream.

use fedbio_core::dataset::{
    build_balanced_validation, partition_iid, partition_noniid, split_train_test, TabularDataset,
};
use fedbio_core::numerics::DenseMatrix;
use fedbio_core::RngStream;
use proptest::prelude::*;

fn dataset(group_sizes: &[usize]) -> TabularDataset {
    let n: usize = group_sizes.iter().sum();
    let mut groups = Vec::with_capacity(n);
    for (g, &size) in group_sizes.iter().enumerate() {
        groups.extend(std::iter::repeat_n(g, size));
    }
    let rows: Vec<[f64; 2]> = (0..n).map(|i| [i as f64, (i % 7) as f64]).collect();
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let labels = (0..n).map(|i| (i % 2) as u8).collect();
    TabularDataset::new(
        DenseMatrix::from_rows(&refs),
        labels,
        groups,
        group_sizes.len(),
        vec!["a".into(), "b".into()],
    )
    .unwrap()
}

fn sorted_ids(parts: &[&TabularDataset]) -> Vec<u64> {
    let mut ids: Vec<u64> = parts
        .iter()
        .flat_map(|p| p.row_ids.iter().copied())
        .collect();
    ids.sort_unstable();
    ids
}

fn all_ids(ds: &TabularDataset) -> Vec<u64> {
    sorted_ids(&[ds])
}

/// Rows keep their features, label and group through a split.
fn rows_intact(part: &TabularDataset, source: &TabularDataset) -> bool {
    (0..part.len()).all(|i| {
        let id = part.row_ids[i] as usize;
        part.row(i) == source.row(id)
            && part.labels[i] == source.labels[id]
            && part.groups[i] == source.groups[id]
    })
}

fn group_sizes() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(3usize..60, 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn train_test_split_is_a_stratified_partition(sizes in group_sizes(), seed in 0u64..1000, ratio in 0.2f64..0.9) {
        let ds = dataset(&sizes);
        let (train, test) = split_train_test(&ds, ratio, &mut RngStream::new(seed, 0)).unwrap();
        prop_assert_eq!(sorted_ids(&[&train, &test]), all_ids(&ds));
        prop_assert!(rows_intact(&train, &ds) && rows_intact(&test, &ds));
        // Each group is split on its own, so its train count is within a row of ratio * size.
        let tc = train.group_counts();
        for (g, &n) in sizes.iter().enumerate() {
            let gap = (tc[g] as f64 - ratio * n as f64).abs();
            prop_assert!(gap <= 1.0, "group {} off by {} rows", g, gap);
            prop_assert!(tc[g] >= 1 && tc[g] < n);
        }
        let again = split_train_test(&ds, ratio, &mut RngStream::new(seed, 0)).unwrap();
        prop_assert_eq!(again.0, train);
    }

    #[test]
    fn iid_partition_is_balanced(sizes in group_sizes(), clients in 1usize..7, seed in 0u64..1000) {
        let ds = dataset(&sizes);
        let shards = partition_iid(&ds, clients, &mut RngStream::new(seed, 1)).unwrap();
        let refs: Vec<&TabularDataset> = shards.iter().collect();
        prop_assert_eq!(sorted_ids(&refs), all_ids(&ds));
        let lens: Vec<usize> = shards.iter().map(|s| s.len()).collect();
        prop_assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
        prop_assert!(shards.iter().all(|s| rows_intact(s, &ds)));
    }

    #[test]
    fn noniid_partition_uses_two_two_six_shares(sizes in group_sizes(), seed in 0u64..1000) {
        let ds = dataset(&sizes);
        let shards = partition_noniid(&ds, 3, &mut RngStream::new(seed, 2)).unwrap();
        let refs: Vec<&TabularDataset> = shards.iter().collect();
        prop_assert_eq!(sorted_ids(&refs), all_ids(&ds));
        for (g, &n) in sizes.iter().enumerate() {
            let mut got: Vec<usize> = shards.iter().map(|s| s.group_counts()[g]).collect();
            got.sort_unstable();
            let mut want = vec![n / 5, n / 5, n - 2 * (n / 5)];
            want.sort_unstable();
            prop_assert_eq!(got, want);
        }
        let again = partition_noniid(&ds, 3, &mut RngStream::new(seed, 2)).unwrap();
        prop_assert_eq!(again, shards);
    }

    #[test]
    fn validation_is_balanced_and_disjoint(sizes in group_sizes(), per_group in 0usize..4, seed in 0u64..1000) {
        let ds = dataset(&sizes);
        let (val, rest) = build_balanced_validation(&ds, per_group, &mut RngStream::new(seed, 3)).unwrap();
        prop_assert!(val.group_counts().iter().all(|&c| c == per_group));
        prop_assert_eq!(sorted_ids(&[&val, &rest]), all_ids(&ds));
        prop_assert!(val.row_ids.iter().all(|id| !rest.row_ids.contains(id)));
        if per_group == 0 {
            prop_assert_eq!(rest, ds);
        }
    }
}

#[test]
fn ten_sample_group_splits_two_two_six() {
    let ds = dataset(&[10, 10]);
    let shards = partition_noniid(&ds, 3, &mut RngStream::new(5, 0)).unwrap();
    for g in 0..2 {
        let mut counts: Vec<usize> = shards.iter().map(|s| s.group_counts()[g]).collect();
        counts.sort_unstable();
        assert_eq!(counts, vec![2, 2, 6]);
    }
}
