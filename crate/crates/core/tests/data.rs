//! Corpus generation, splitting, storage, preprocessing and augmentation.

use std::collections::HashSet;

use ndarray::Array2;
use proptest::prelude::*;

use semicontrast::data::{
    apply_spatial, augment_pair, augment_view_traced, generate_synthetic_corpus, make_batch, preprocess_slice,
    read_corpus_dir, resize_nearest, split_and_select, write_corpus_dir, AugmentMode, AugmentPolicy, CorpusSpec,
    Slice2D, SplitRatios, Volume,
};
use semicontrast::rng;

fn small_spec(volumes: usize) -> CorpusSpec {
    CorpusSpec { num_volumes: volumes, slices_per_volume: 3, resolution: 16, num_foreground_classes: 2, noise: 0.3, block_size: 8 }
}

fn corpus(n: usize) -> Vec<Volume> {
    generate_synthetic_corpus(&small_spec(n), 11).unwrap()
}

#[test]
fn synthetic_corpus_matches_its_spec_and_seed() {
    let spec = small_spec(6);
    let a = generate_synthetic_corpus(&spec, 3).unwrap();
    assert_eq!(a, generate_synthetic_corpus(&spec, 3).unwrap());
    assert_ne!(a, generate_synthetic_corpus(&spec, 4).unwrap());
    assert_eq!(a.len(), 6);
    let ids: HashSet<&str> = a.iter().map(|v| v.id.as_str()).collect();
    assert_eq!(ids.len(), 6);
    for v in &a {
        assert_eq!(v.voxels.dim(), (3, 16, 16));
        let labels = v.labels.as_ref().unwrap();
        assert!(labels.iter().all(|&k| (0..=2).contains(&k)));
        assert!(v.voxels.iter().all(|x| x.is_finite()));
    }
    assert!(a.iter().any(|v| v.max_label() == 2));
}

#[test]
fn corpus_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut vols = corpus(3);
    vols[1] = vols[1].without_labels();
    write_corpus_dir(dir.path(), &vols).unwrap();
    assert_eq!(read_corpus_dir(dir.path()).unwrap(), vols);
}

#[test]
fn preprocessing_standardizes_the_volume_and_resizes() {
    let v = &corpus(1)[0];
    let native: Vec<f64> =
        (0..v.depth()).flat_map(|i| preprocess_slice(v, i, 16).unwrap().pixels.into_iter().map(f64::from)).collect();
    let mean = native.iter().sum::<f64>() / native.len() as f64;
    let var = native.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / native.len() as f64;
    assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4, "mean {mean}, var {var}");

    let s = preprocess_slice(v, 1, 32).unwrap();
    assert_eq!(s.side(), (32, 32));
    let truth = v.labels.as_ref().unwrap().index_axis(ndarray::Axis(0), 1).to_owned();
    assert_eq!(s.labels.as_ref().unwrap(), &resize_nearest(truth.view(), 32, 32));
    // nearest-neighbour doubling repeats each label in a 2x2 block
    assert!(s.labels.unwrap().indexed_iter().all(|((r, c), &k)| k == truth[(r / 2, c / 2)]));
}

#[test]
fn identity_policy_reproduces_input() {
    let s = corpus(1)[0].raw_slice(0);
    let mut r = rng::stream(5, &[]);
    for mode in [AugmentMode::IntensityOnly, AugmentMode::IntensityAndSpatial] {
        let (a, b) = augment_pair(&s, &AugmentPolicy::identity(mode), &mut r);
        assert_eq!(a, s);
        assert_eq!(b, s);
    }
}

#[test]
fn batches_pair_consecutive_views() {
    let vols = corpus(2);
    let slices: Vec<Slice2D> = vols.iter().map(|v| v.raw_slice(0)).collect();
    let batch = make_batch(&slices, &AugmentPolicy::default(), &mut rng::stream(1, &[])).unwrap();
    assert_eq!(batch.len(), 4);
    for i in 0..4 {
        assert_eq!(batch.pairing.partner(i), i ^ 1);
        assert_eq!(batch.images[i].source_volume, slices[i / 2].source_volume);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_the_corpus(n in 5usize..40, fraction in 0.01f64..=1.0, seed in any::<u64>()) {
        let vols: Vec<Volume> = (0..n)
            .map(|i| Volume::new(format!("v{i:03}"), ndarray::Array3::zeros((1, 8, 8)), None).unwrap())
            .collect();
        let s = split_and_select(&vols, SplitRatios::HIPPOCAMPUS, fraction, seed).unwrap();
        prop_assert_eq!(&s, &split_and_select(&vols, SplitRatios::HIPPOCAMPUS, fraction, seed).unwrap());
        let all: Vec<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(all.iter().collect::<HashSet<_>>().len(), n);
        prop_assert!(!s.val.is_empty() && !s.test.is_empty());

        let want = ((fraction * s.train.len() as f64).round() as usize).clamp(1, s.train.len());
        prop_assert_eq!(s.labeled_train.len(), want);
        let mut merged: Vec<String> = s.labeled_train.iter().chain(&s.unlabeled_train).cloned().collect();
        merged.sort();
        prop_assert_eq!(&merged, &s.train);
        prop_assert!(s.labeled_train.iter().all(|id| !s.unlabeled_train.contains(id)));
    }

    #[test]
    fn spatial_transforms_move_labels_with_pixels(seed in any::<u64>()) {
        // encode each pixel's label in its intensity and check they stay in step
        let labels = Array2::from_shape_fn((16, 16), |(r, c)| ((r / 4 + c / 4) % 3) as i32);
        let s = Slice2D { pixels: labels.mapv(|k| k as f32), labels: Some(labels), source_volume: "v".into(), slice_index: 0 };
        let policy = AugmentPolicy { apply_prob: 1.0, crop_scale_min: 1.0, ..AugmentPolicy::identity(AugmentMode::IntensityAndSpatial) };
        let policy = AugmentPolicy { flip_prob: 0.5, ..policy };
        let (out, t) = augment_view_traced(&s, &policy, &mut rng::stream(seed, &[]));
        prop_assert_eq!(&out, &apply_spatial(&s, &t));
        prop_assert_eq!(out.pixels.mapv(|x| x as i32), out.labels.unwrap());
    }

    #[test]
    fn intensity_only_views_keep_geometry(seed in any::<u64>()) {
        let s = corpus(1)[0].raw_slice(1);
        let (a, b) = augment_pair(&s, &AugmentPolicy::default(), &mut rng::stream(seed, &[]));
        prop_assert_eq!(&a.labels, &s.labels);
        prop_assert_eq!(&b.labels, &s.labels);
        prop_assert!(a.pixels.iter().chain(b.pixels.iter()).all(|x| x.is_finite()));
    }
}
