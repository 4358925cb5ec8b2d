mod common;

use std::fs;

use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::Rng;

use srdl::data::synth::sample_labels;
use srdl::data::{
    augment_train, generate_synthetic, load_manifest, preprocess_eval, AugmentationConfig, CropMode, LabelVocabulary,
    SyntheticSpec, WordVectors,
};
use srdl::Error;

fn vocab() -> LabelVocabulary {
    LabelVocabulary::new(["cat", "dog", "person"]).unwrap()
}

#[test]
fn handwritten_manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("img")).unwrap();
    for f in ["a.png", "b.png", "c.png"] {
        RgbImage::new(4, 4).save(dir.path().join("img").join(f)).unwrap();
    }
    let text = "img/a.png\tdog,cat\nimg/b.png\tperson\nimg/c.png\t\n";
    let path = dir.path().join("manifest.tsv");
    fs::write(&path, text).unwrap();
    let m = load_manifest(&path, &vocab()).unwrap();
    assert_eq!(m.len(), 3);
    assert_eq!(m.records[0].path, "img/a.png");
    assert_eq!(m.records[0].labels, vec![0, 1]);
    assert_eq!(m.label_vector(0).0.to_vec(), vec![1.0, 1.0, 0.0]);
    assert_eq!(m.label_vector(1).0.to_vec(), vec![0.0, 0.0, 1.0]);
    assert_eq!(m.label_vector(2).0.to_vec(), vec![0.0, 0.0, 0.0]);
    assert_eq!(m.image_path(1), dir.path().join("img/b.png"));
    // category order is canonical on output
    assert_eq!(m.to_text(), "img/a.png\tcat,dog\nimg/b.png\tperson\nimg/c.png\t\n");
}

#[test]
fn manifest_errors_and_warnings() {
    let dir = tempfile::tempdir().unwrap();
    RgbImage::new(4, 4).save(dir.path().join("a.png")).unwrap();
    let path = dir.path().join("m.tsv");

    fs::write(&path, "a.png\tcat\na.png\tcat,cat\n").unwrap();
    let m = load_manifest(&path, &vocab()).unwrap();
    assert_eq!(m.records[1].labels, vec![0]);
    assert!(m.warnings.iter().any(|w| w.contains("duplicate image")));
    assert!(m.warnings.len() >= 2);

    fs::write(&path, "a.png\tcat\na.png\tzebra\n").unwrap();
    match load_manifest(&path, &vocab()).unwrap_err() {
        Error::Parse { line, message, .. } => {
            assert_eq!(line, 2);
            assert!(message.contains("zebra"));
        }
        other => panic!("{other}"),
    }

    fs::write(&path, "").unwrap();
    assert!(load_manifest(&path, &vocab()).unwrap().is_empty());
}

#[test]
fn word_vectors_parse_and_report_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wv.txt");
    fs::write(&path, "cat 0.5 -1\ndog 2 3e-1\n").unwrap();
    let wv = WordVectors::load(&path).unwrap();
    assert_eq!(wv.dim(), 2);
    assert_eq!(wv.get("dog"), Some(&[2.0, 0.3][..]));
    fs::write(&path, "cat 0.5 -1\ndog 2\n").unwrap();
    match WordVectors::load(&path).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 2),
        other => panic!("{other}"),
    }
    let out = dir.path().join("out.txt");
    let mut wv = WordVectors::new(3);
    wv.insert("b", vec![1.0, 0.1, -2.5]).unwrap();
    wv.insert("a", vec![1e-300, 0.0, 7.0]).unwrap();
    wv.save(&out).unwrap();
    assert_eq!(WordVectors::load(&out).unwrap(), wv);
}

#[test]
fn label_sampling_follows_the_matrix() {
    let m = SyntheticSpec::linked_pairs(5, 0.1, &[(0, 1), (2, 3)], 0.8);
    let mut rng = common::rng(41);
    let n = 10_000;
    let mut anchors = vec![0usize; 5];
    let mut joint = vec![vec![0usize; 5]; 5];
    for _ in 0..n {
        let (a, labels) = sample_labels(&m, &mut rng);
        assert!(labels.contains(&a));
        anchors[a] += 1;
        for &j in &labels {
            joint[a][j] += 1;
        }
    }
    let total: f64 = (0..5).map(|i| m[i][i]).sum();
    for i in 0..5 {
        let freq = anchors[i] as f64 / n as f64;
        assert!((freq - m[i][i] / total).abs() <= 0.03, "anchor {i}: {freq}");
        for j in 0..5 {
            if i != j {
                let p = joint[i][j] as f64 / anchors[i] as f64;
                assert!((p - m[i][j]).abs() <= 0.03, "({i}, {j}): {p} vs {}", m[i][j]);
            }
        }
    }
}

#[test]
fn generator_is_byte_deterministic() {
    let mut spec = SyntheticSpec::new(6, 30, 9);
    spec.occlusion_rate = 0.3;
    spec.cooccurrence = Some(SyntheticSpec::linked_pairs(6, 0.05, &[(0, 1)], 0.8));
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(&spec).unwrap().write_to(a.path()).unwrap();
    generate_synthetic(&spec).unwrap().write_to(b.path()).unwrap();
    let mut files: Vec<_> = walk(a.path());
    files.sort();
    assert!(files.len() > 30);
    for rel in files {
        assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap(), "{rel}");
    }
    spec.seed = 10;
    let c = generate_synthetic(&spec).unwrap();
    let d = generate_synthetic(&SyntheticSpec { seed: 9, ..spec }).unwrap();
    assert_ne!(c.images[0].image, d.images[0].image);
}

fn walk(root: &std::path::Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().display().to_string());
            }
        }
    }
    out
}

#[test]
fn synthetic_labels_are_binary_and_nonempty() {
    let mut spec = SyntheticSpec::new(8, 100, 4);
    spec.cooccurrence = Some(SyntheticSpec::linked_pairs(8, 0.05, &[(0, 1), (2, 3)], 0.8));
    spec.occlusion_rate = 0.3;
    let ds = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = ds.manifest(dir.path());
    for i in 0..m.len() {
        let y = m.label_vector(i);
        assert!(y.0.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(y.0.sum() >= 1.0);
        let img = &ds.images[i];
        let mut seen: Vec<usize> = img.objects.iter().map(|o| o.category).collect();
        seen.sort_unstable();
        assert_eq!(seen, img.labels);
    }
    let occluded = ds.images.iter().flat_map(|i| &i.objects).filter(|o| o.occluded).count();
    assert!(occluded > 0);
}

#[test]
fn infeasible_cooccurrence_is_rejected() {
    let mut spec = SyntheticSpec::new(3, 10, 1);
    spec.cooccurrence = Some(vec![vec![0.0; 3]; 3]);
    assert!(matches!(generate_synthetic(&spec), Err(Error::Cooccurrence(_))));
    spec.cooccurrence = Some(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0]]);
    assert!(matches!(generate_synthetic(&spec), Err(Error::Cooccurrence(_))));
    spec.cooccurrence = Some(vec![vec![1.0, 1.5, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    assert!(generate_synthetic(&spec).is_err());
}

fn random_image(seed: u64, w: u32, h: u32) -> RgbImage {
    let mut rng = common::rng(seed);
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

#[test]
fn eval_transform_is_pure_and_sized() {
    let cfg = AugmentationConfig::desk();
    let img = random_image(3, 50, 70);
    let a = preprocess_eval(&img, &cfg).unwrap();
    let b = preprocess_eval(&img, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.height(), a.width()), (64, 64));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmentation_always_yields_final_size(
        seed in any::<u64>(),
        w in 2u32..90,
        h in 2u32..90,
        single in any::<bool>(),
    ) {
        let cfg = AugmentationConfig {
            resize_base: 40,
            crop_scales: vec![40, 30, 12, 1],
            final_size: 24,
            crop_mode: if single { CropMode::Single } else { CropMode::Independent },
            ..Default::default()
        };
        let img = random_image(seed, w, h);
        let mut rng = common::rng(seed ^ 7);
        let (t, rec) = augment_train(&img, &cfg, &mut rng).unwrap();
        prop_assert_eq!(t.0.dim(), (3, 24, 24));
        prop_assert!(t.0.iter().all(|v| v.is_finite()));
        prop_assert!(rec.crop_x + rec.crop_width <= 40 && rec.crop_y + rec.crop_height <= 40);
        if single {
            prop_assert_eq!(rec.crop_width, rec.crop_height);
        }
        // same seed, same draw
        let (t2, rec2) = augment_train(&img, &cfg, &mut common::rng(seed ^ 7)).unwrap();
        prop_assert_eq!(t, t2);
        prop_assert_eq!(rec, rec2);
    }

    #[test]
    fn flip_only_mirrors_columns(seed in any::<u64>()) {
        let img = random_image(seed, 16, 16);
        let base = AugmentationConfig {
            resize_base: 16,
            crop_scales: vec![16],
            final_size: 16,
            ..Default::default()
        };
        let plain = augment_train(&img, &AugmentationConfig { hflip_probability: 0.0, ..base.clone() }, &mut common::rng(1)).unwrap().0;
        let flipped = augment_train(&img, &AugmentationConfig { hflip_probability: 1.0, ..base }, &mut common::rng(1)).unwrap().0;
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    prop_assert_eq!(plain.0[[c, y, x]], flipped.0[[c, y, 15 - x]]);
                }
            }
        }
    }
}
