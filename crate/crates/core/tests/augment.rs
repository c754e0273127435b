mod common;

use std::path::PathBuf;

use common::oracles::folded_normal_mean;
use labaug::augment::{
    apply_corruption, apply_gamma, apply_planckian_jitter, apply_plasma, preprocess_flip_crop, Corruption,
    CorruptionSpec, Image,
};
use labaug::tensor::checkpoint::{self, NamedTensor};
use labaug::Tensor;
use rand::Rng;

fn random_image(seed: u64, lo: f32, hi: f32) -> Image {
    let mut rng = labaug::seed::rng(seed);
    let data = (0..3 * 8 * 8).map(|_| rng.random_range(lo..hi)).collect();
    Image::new(3, 8, 8, data).unwrap()
}

#[test]
fn gaussian_noise_matches_folded_normal_mean() {
    let spec = CorruptionSpec::new(Corruption::GaussianNoise, 5).unwrap();
    let (mut total, mut count) = (0.0f64, 0usize);
    for i in 0..1000 {
        let img = random_image(i, 0.3, 0.7);
        let out = apply_corruption(&img, spec, 10_000 + i).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            total += (a - b).abs() as f64;
            count += 1;
        }
    }
    let mean = total / count as f64;
    let expected = folded_normal_mean(0.10);
    assert!((mean / expected - 1.0).abs() < 0.05, "mean {mean}, expected {expected}");
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corruptions_v1.lakt")
}

fn golden_outputs() -> Vec<NamedTensor> {
    let img = random_image(77, 0.0, 1.0);
    let mut out = vec![NamedTensor {
        name: "input".into(),
        tensor: Tensor::new(vec![3, 8, 8], img.data().to_vec()).unwrap(),
    }];
    for c in Corruption::ALL {
        for s in [1u8, 3, 5] {
            let spec = CorruptionSpec::new(c, s).unwrap();
            let res = apply_corruption(&img, spec, 5).unwrap();
            out.push(NamedTensor {
                name: format!("{c}_s{s}"),
                tensor: Tensor::new(vec![3, 8, 8], res.into_data()).unwrap(),
            });
        }
    }
    let extra = [
        ("gamma_0.7", apply_gamma(&img, 0.7).unwrap()),
        ("planckian_4500", apply_planckian_jitter(&img, 4500.0).unwrap()),
        ("plasma_0.5_0.3", apply_plasma(&img, 0.5, 0.3, 11).unwrap()),
        ("flip_crop", preprocess_flip_crop(&img, (8, 8), 3).unwrap()),
    ];
    for (name, res) in extra {
        out.push(NamedTensor {
            name: name.into(),
            tensor: Tensor::new(vec![3, 8, 8], res.into_data()).unwrap(),
        });
    }
    out
}

/// Bit-exact regression against frozen raw tensors. Regenerate with
/// `LABAUG_BLESS=1 cargo test --test augment` after an intended change.
#[test]
fn outputs_match_frozen_fixture() {
    let got = golden_outputs();
    let path = fixture_path();
    if std::env::var_os("LABAUG_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        checkpoint::save(&path, &got).unwrap();
    }
    let want = checkpoint::load(&path).expect("fixture exists; bless it with LABAUG_BLESS=1");
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g.name, w.name);
        let same = g
            .tensor
            .data()
            .iter()
            .zip(w.tensor.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{} differs from the fixture", g.name);
    }
}

#[test]
fn severity_increases_damage_on_average() {
    for c in [
        Corruption::GaussianNoise,
        Corruption::ImpulseNoise,
        Corruption::BoxBlur,
        Corruption::Contrast,
    ] {
        let mut last = 0.0;
        for s in 1..=5 {
            let spec = CorruptionSpec::new(c, s).unwrap();
            let mut total = 0.0;
            for i in 0..50 {
                let img = random_image(i, 0.0, 1.0);
                let out = apply_corruption(&img, spec, i).unwrap();
                total += out
                    .data()
                    .iter()
                    .zip(img.data())
                    .map(|(a, b)| (a - b).abs() as f64)
                    .sum::<f64>();
            }
            assert!(total > last, "{c} severity {s}");
            last = total;
        }
    }
}
