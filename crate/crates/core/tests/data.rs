use labaug::data::{
    batches, cifar_dir_from_env, epoch_order, load_cifar_binary, load_cifar_split, subset_indices, synthesize_shapes,
    CifarVariant, Split, CIFAR_PIXELS,
};
use labaug::Error;
use proptest::prelude::*;

fn record(label: u8, fill: u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend(std::iter::repeat_n(fill, CIFAR_PIXELS));
    r
}

#[test]
fn split_archives_are_concatenated_in_order() {
    let dir = tempfile::tempdir().unwrap();
    for (i, file) in CifarVariant::Cifar10.files(Split::Train).iter().enumerate() {
        let mut bytes = record(i as u8, 10 * i as u8);
        bytes.extend(record(9 - i as u8, 255));
        std::fs::write(dir.path().join(file), bytes).unwrap();
    }
    let ds = load_cifar_split(dir.path(), CifarVariant::Cifar10, Split::Train).unwrap();
    assert_eq!(ds.len(), 10);
    assert_eq!(ds.labels, vec![0, 9, 1, 8, 2, 7, 3, 6, 4, 5]);
    assert_eq!(ds.image(2).data()[0], 10.0 / 255.0);
    assert_eq!(ds.image(1).data()[CIFAR_PIXELS - 1], 1.0);
}

#[test]
fn missing_archive_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_cifar_split(dir.path(), CifarVariant::Cifar10, Split::Test).unwrap_err();
    assert!(matches!(err, Error::Data { .. }), "{err}");
    std::fs::write(dir.path().join("test_batch.bin"), vec![0u8; 100]).unwrap();
    let err = load_cifar_binary(dir.path().join("test_batch.bin"), CifarVariant::Cifar10).unwrap_err();
    assert!(err.to_string().contains("multiple"), "{err}");
}

/// Runs only when a real CIFAR-10 binary directory is provided.
#[test]
fn real_cifar10_first_record() {
    let Some(dir) = cifar_dir_from_env("LABAUG_CIFAR10_DIR") else {
        eprintln!("LABAUG_CIFAR10_DIR not set; skipping");
        return;
    };
    let ds = load_cifar_binary(dir.join("data_batch_1.bin"), CifarVariant::Cifar10).unwrap();
    assert_eq!(ds.len(), 10_000);
    assert_eq!(ds.labels[0], 6);
    let test = load_cifar_split(&dir, CifarVariant::Cifar10, Split::Test).unwrap();
    assert_eq!(test.len(), 10_000);
    assert!(test.class_counts().iter().all(|&c| c == 1000));
}

#[test]
fn epoch_orders_are_permutations() {
    for trial in 0..1000u64 {
        let n = 1 + (trial as usize * 37) % 300;
        let mut order = epoch_order(n, trial, trial % 7);
        order.sort_unstable();
        assert!(order.iter().copied().eq(0..n), "trial {trial}");
    }
    assert_ne!(epoch_order(100, 1, 0), epoch_order(100, 1, 1));
    assert_eq!(epoch_order(100, 1, 4), epoch_order(100, 1, 4));
}

proptest! {
    #[test]
    fn batches_partition_the_epoch(n in 1usize..500, bs in 1usize..200, seed in any::<u64>(), epoch in 0u64..50) {
        let b = batches(n, bs, seed, epoch).unwrap();
        prop_assert_eq!(b.len(), n.div_ceil(bs));
        prop_assert!(b[..b.len() - 1].iter().all(|x| x.len() == bs));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        prop_assert!(all.into_iter().eq(0..n));
    }

    #[test]
    fn subsets_balance_classes(k in 2usize..=8, extra in 0usize..60, n_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let ds = synthesize_shapes(k * 10 + extra, k, 3).unwrap();
        let n = k + ((ds.len() - k) as f64 * n_frac) as usize;
        let idx = subset_indices(&ds, n, seed).unwrap();
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let mut counts = vec![0usize; k];
        for &i in &idx {
            counts[ds.labels[i]] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1, "{:?}", counts);
    }
}
