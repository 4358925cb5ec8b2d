mod common;

use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::Rng;

use srdl::backbone::FeatureMap;
use srdl::car::{fuse, pool_representation, AttentionPair};
use srdl::erasing::{
    erase, invocation_count, locate_region, marginal_profiles, oe_forward, select_interval, ErasureConfig,
    ErasureRegion,
};

fn check_against_brute_force(sa: &Array2<f64>, alpha: f64) {
    let got = locate_region(sa.view(), alpha).ok().map(|r| (r.x, r.y));
    assert_eq!(got, common::brute_region(sa, alpha), "{sa:?} alpha {alpha}");
}

#[test]
fn random_maps_match_brute_force() {
    let mut rng = common::rng(21);
    for _ in 0..2000 {
        let (w, h) = (rng.random_range(1..7), rng.random_range(1..7));
        let sa = common::uniform2(&mut rng, w, h, 0.0, 1.0);
        check_against_brute_force(&sa, rng.random_range(0.05..0.95));
    }
}

#[test]
fn binary_three_by_three_maps_match_brute_force() {
    for bits in 0u32..(1 << 9) {
        let sa = Array2::from_shape_fn((3, 3), |(x, y)| f64::from((bits >> (x * 3 + y)) & 1));
        check_against_brute_force(&sa, 0.5);
    }
}

#[test]
fn random_profiles_match_brute_interval() {
    let mut rng = common::rng(22);
    for _ in 0..5000 {
        let n = rng.random_range(1..12);
        // coarse levels produce plateaus and repeated peaks
        let m: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..5u8)) / 4.0).collect();
        let alpha = [0.25, 0.5, 0.75, 1.0][rng.random_range(0..4)];
        assert_eq!(select_interval(Array1::from(m.clone()).view(), alpha), common::brute_interval(&m, alpha));
    }
}

#[test]
fn worked_rectangle() {
    // peak at x=1..2, y=2
    let mut sa = Array2::from_elem((4, 4), 0.1);
    sa[[1, 2]] = 0.9;
    sa[[2, 2]] = 0.8;
    sa[[3, 0]] = 0.3;
    let region = locate_region(sa.view(), 0.5).unwrap();
    assert_eq!(region, ErasureRegion { x: (1, 2), y: (2, 2) });
    let erased = erase(sa.view(), &region);
    assert_eq!(erased[[1, 2]], 0.0);
    assert_eq!(erased[[2, 2]], 0.0);
    assert_eq!(erased[[3, 0]], 0.3);
    let mask = region.keep_mask(4, 4);
    assert_eq!(mask.iter().filter(|&&v| v == 0.0).count(), 2);
    assert_eq!(mask[4 + 2], 0.0);
}

#[test]
fn full_map_erasure_pools_to_zero_for_nonnegative_features() {
    let mut rng = common::rng(5);
    let fm = FeatureMap::new(Array3::from_shape_simple_fn((3, 3, 4), || rng.random_range(0.0..1.0))).unwrap();
    let pair = AttentionPair {
        channel: Array1::from_elem(4, 0.5),
        spatial: Array2::from_elem((3, 3), 0.7),
    };
    let all = ErasureRegion { x: (0, 2), y: (0, 2) };
    let erased = AttentionPair {
        channel: pair.channel.clone(),
        spatial: erase(pair.spatial.view(), &all),
    };
    let rep = pool_representation(&fuse(&fm, &erased).unwrap());
    // only the channel half of the gate remains
    let half = pool_representation(&FeatureMap(fm.0.mapv(|v| v * 0.25)));
    for (a, b) in rep.0.iter().zip(&half.0) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn oe_forward_counts_invocations_and_selects_top_scores() {
    let mut rng = common::rng(8);
    let fm = common::feature_map(&mut rng, 3, 3, 2);
    let pairs: Vec<AttentionPair> = (0..4)
        .map(|_| AttentionPair {
            channel: Array1::from_shape_simple_fn(2, || rng.random_range(0.0..1.0)),
            spatial: common::uniform2(&mut rng, 3, 3, 0.0, 1.0),
        })
        .collect();
    let before = invocation_count();
    let out = oe_forward(
        &fm,
        &pairs,
        ndarray::array![0.2, 0.9, 0.4, 0.8].view(),
        &ErasureConfig {
            topk: 2,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(invocation_count() > before);
    let cats: Vec<usize> = out.erased.iter().map(|e| e.category).collect();
    assert_eq!(cats, vec![1, 3]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn region_is_invariant_under_positive_affine_maps(
        seed in any::<u64>(),
        w in 1usize..7,
        h in 1usize..7,
        scale in 0.01f64..100.0,
        shift in -10.0f64..10.0,
        alpha in 0.05f64..0.95,
    ) {
        let mut rng = common::rng(seed);
        let sa = common::uniform2(&mut rng, w, h, 0.0, 1.0);
        let moved = sa.mapv(|v| scale * v + shift);
        let a = locate_region(sa.view(), alpha).ok();
        let b = locate_region(moved.view(), alpha).ok();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn interval_is_invariant_under_positive_affine_profiles(
        seed in any::<u64>(),
        n in 2usize..10,
        scale in 0.01f64..100.0,
        shift in -10.0f64..10.0,
        alpha in 0.05f64..0.95,
    ) {
        let mut rng = common::rng(seed);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let normalize = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Array1::from_iter(v.iter().map(|x| (x - lo) / (hi - lo)))
        };
        let moved: Vec<f64> = raw.iter().map(|v| scale * v + shift).collect();
        prop_assert_eq!(
            select_interval(normalize(&raw).view(), alpha),
            select_interval(normalize(&moved).view(), alpha)
        );
    }

    #[test]
    fn profiles_are_normalized_and_region_holds_the_peak(seed in any::<u64>(), w in 2usize..6, h in 2usize..6) {
        let mut rng = common::rng(seed);
        let sa = common::uniform2(&mut rng, w, h, 0.0, 1.0);
        let p = marginal_profiles(sa.view()).unwrap();
        for v in [&p.x, &p.y] {
            prop_assert!(v.iter().all(|&t| (0.0..=1.0).contains(&t)));
            prop_assert!(v.iter().any(|&t| t == 1.0));
            prop_assert!(v.iter().any(|&t| t == 0.0));
        }
        let region = locate_region(sa.view(), 0.5).unwrap();
        let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
        for ((x, y), &v) in sa.indexed_iter() {
            if v > best {
                best = v;
                at = (x, y);
            }
        }
        prop_assert!(region.contains(at.0, at.1));
    }
}
