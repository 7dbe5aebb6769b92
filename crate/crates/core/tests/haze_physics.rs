mod common;

use common::rng;
use dehaze::hazegen::{
    apply_haze, invert_haze, load_dataset, make_dataset, synth_depth, write_dataset, Airlight, DatasetConfig,
    DepthStyle, HazeParams, Inversion,
};
use dehaze::{Shape, Tensor};
use proptest::prelude::*;

fn clear(seed: u64, h: usize, w: usize) -> Tensor {
    Tensor::uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut rng(seed)).unwrap()
}

fn style(i: usize) -> DepthStyle {
    DepthStyle::ALL[i % 3]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_lies_between_scene_and_airlight(seed in 0u64..10_000, beta in 0.0f64..3.0, a in 0.0f64..=1.0, s in 0usize..3) {
        let j = clear(seed, 12, 10);
        let p = HazeParams { airlight: Airlight::Gray(a), beta, depth: synth_depth(seed, 12, 10, style(s), 2.0).unwrap() };
        let i = apply_haze(&j, &p).unwrap();
        for (iv, jv) in i.data().iter().zip(j.data()) {
            prop_assert!(*iv >= jv.min(a) - 1e-15 && *iv <= jv.max(a) + 1e-15);
        }
    }

    #[test]
    fn inversion_undoes_haze_above_the_floor(seed in 0u64..10_000, beta in 0.0f64..2.9, s in 0usize..3) {
        let j = clear(seed, 9, 11);
        let p = HazeParams {
            airlight: Airlight::Rgb([0.7, 0.85, 1.0]),
            beta,
            // exp(-2.9 * 1.0) > 0.05
            depth: synth_depth(seed, 9, 11, style(s), 1.0).unwrap(),
        };
        let back = invert_haze(&apply_haze(&j, &p).unwrap(), &p, Inversion::default()).unwrap();
        prop_assert!(back.max_abs_diff(&j) < 1e-10);
    }

    #[test]
    fn thicker_haze_moves_towards_airlight(seed in 0u64..10_000, b0 in 0.0f64..2.0, db in 0.0f64..2.0) {
        let j = clear(seed, 8, 8);
        let depth = synth_depth(seed, 8, 8, DepthStyle::Blobs, 1.0).unwrap();
        let a = 0.9;
        let hazy = |beta| apply_haze(&j, &HazeParams { airlight: Airlight::Gray(a), beta, depth: depth.clone() }).unwrap();
        let (thin, thick) = (hazy(b0), hazy(b0 + db));
        for (t0, t1) in thin.data().iter().zip(thick.data()) {
            prop_assert!((t1 - a).abs() <= (t0 - a).abs() + 1e-15);
        }
    }
}

#[test]
fn no_scattering_is_exactly_the_identity() {
    let j = clear(1, 16, 16);
    let p = HazeParams {
        airlight: Airlight::Gray(0.8),
        beta: 0.0,
        depth: synth_depth(1, 16, 16, DepthStyle::PerlinLike, 1.0).unwrap(),
    };
    assert_eq!(apply_haze(&j, &p).unwrap(), j);
    assert_eq!(invert_haze(&j, &p, Inversion::default()).unwrap(), j);
}

#[test]
fn dense_haze_tends_to_airlight() {
    let j = clear(2, 8, 8);
    let p = HazeParams {
        airlight: Airlight::Rgb([0.7, 0.8, 0.9]),
        beta: 50.0,
        depth: Tensor::full(Shape::new(1, 1, 8, 8), 1.0).unwrap(),
    };
    let i = apply_haze(&j, &p).unwrap();
    for c in 0..3 {
        let a = p.airlight.channel(c);
        assert!(i.plane(0, c).iter().all(|v| (v - a).abs() < 1e-20));
    }
}

#[test]
fn hazy_images_are_brighter_under_white_airlight() {
    let data = make_dataset(&DatasetConfig {
        count: 8,
        size: 32,
        seed: 3,
        airlight: (1.0, 1.0),
        ..Default::default()
    })
    .unwrap();
    for s in &data {
        assert!(s.hazy.mean() > s.clear.mean(), "{}", s.id);
    }
}

#[test]
fn dataset_generation_is_seeded_and_order_free() {
    let cfg = DatasetConfig {
        count: 5,
        size: 16,
        seed: 11,
        ..Default::default()
    };
    let a = make_dataset(&cfg).unwrap();
    assert_eq!(a, make_dataset(&cfg).unwrap());
    let prefix = make_dataset(&DatasetConfig {
        count: 2,
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(&a[..2], &prefix[..]);
    let other = make_dataset(&DatasetConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a[0].hazy, other[0].hazy);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        count: 3,
        size: 16,
        seed: 4,
        rgb_airlight: true,
        ..Default::default()
    };
    let data = make_dataset(&cfg).unwrap();
    write_dataset(dir.path(), &data).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), data);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    assert!(manifest.lines().nth(1).unwrap().starts_with("00000 "));
}

#[test]
fn ppm_only_directories_load_quantised() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(&DatasetConfig {
        count: 2,
        size: 8,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    write_dataset(dir.path(), &data).unwrap();
    for e in std::fs::read_dir(dir.path()).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "mdt") {
            std::fs::remove_file(p).unwrap();
        }
    }
    let loaded = load_dataset(dir.path()).unwrap();
    for (l, d) in loaded.iter().zip(&data) {
        assert!(l.hazy.max_abs_diff(&d.hazy) <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, dehaze::Error::Io { .. }), "{err}");
    assert!(err.to_string().contains("manifest.txt"));
}
