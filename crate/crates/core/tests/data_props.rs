use packtrain::data::{batch_at, synth_dataset, Dataset, EpochPermutation, PreprocessCache, PreprocessSpec};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_format_round_trips(n in 1usize..50, d in 1usize..6, classes in 1u32..5, seed in any::<u64>()) {
        let ds = synth_dataset(n, d, classes, seed).unwrap();
        let back = Dataset::from_binary(&ds.to_binary()).unwrap();
        prop_assert_eq!(back.id(), ds.id());
        prop_assert_eq!(back.features(), ds.features());
        prop_assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn epoch_batches_cover_each_index_once(n in 1usize..200, b in 1usize..50, epoch in 0u64..5) {
        let ds = synth_dataset(n, 2, 2, 1).unwrap();
        let perm = EpochPermutation::new(ds.id(), n, epoch);
        let mut seen = vec![0u32; n];
        let mut cursor = 0;
        while cursor < n {
            let len = b.min(n - cursor);
            let batch = batch_at(&ds, &perm, cursor, len).unwrap();
            prop_assert_eq!(&batch, &batch_at(&ds, &perm, cursor, len).unwrap());
            batch.indices.iter().for_each(|&i| seen[i] += 1);
            cursor += len;
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn cached_preprocessing_is_bit_identical(n in 2usize..60, seed in any::<u64>(), scale in 0.0f64..1.0) {
        let ds = synth_dataset(n, 3, 2, seed).unwrap();
        let spec = PreprocessSpec::normalize_for(&ds).with_jitter(seed, scale);
        let perm = EpochPermutation::new(ds.id(), n, 0);
        let batch = batch_at(&ds, &perm, 0, n).unwrap();
        let cache = PreprocessCache::new();
        let first = spec.apply(ds.id(), &batch.features, &batch.indices, &cache);
        let again = spec.apply(ds.id(), &batch.features, &batch.indices, &cache);
        let fresh = spec.apply(ds.id(), &batch.features, &batch.indices, &PreprocessCache::new());
        prop_assert_eq!(&first, &again);
        prop_assert_eq!(&first, &fresh);
        prop_assert_eq!(cache.computations(), n as u64);
        prop_assert_eq!(cache.hits(), n as u64);
    }
}
