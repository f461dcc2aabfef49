//! Metrics against exhaustive brute-force definitions.

mod common;

use common::{brute_boundary, brute_dice, brute_hd95, brute_iou, random_mask};
use proptest::prelude::*;
use rich_unet::metrics::{boundary, dice, hd95, iou, BinaryMask};
use rich_unet::tensor::seeded_rng;
use rich_unet::Error;

#[test]
fn random_pairs_match_brute_force() {
    let mut rng = seeded_rng(2024);
    for i in 0..500 {
        let a = random_mask(&mut rng, 16, 16);
        let b = random_mask(&mut rng, 16, 16);
        let d = dice(&a, &b).unwrap();
        assert_eq!(d, brute_dice(&a, &b), "pair {i}");
        let j = iou(&a, &b).unwrap();
        assert_eq!(j, brute_iou(&a, &b), "pair {i}");
        assert!((j - d / (2.0 - d)).abs() <= 1e-12, "pair {i}");
        assert_eq!(boundary(&a), brute_boundary(&a));
        match hd95(&a, &b) {
            Ok(h) => assert!((h - brute_hd95(&a, &b)).abs() <= 1e-9, "pair {i}"),
            Err(Error::MetricUndefined(_)) => assert!(a.count() == 0 || b.count() == 0),
            Err(e) => panic!("pair {i}: {e}"),
        }
    }
}

#[test]
fn hd95_known_values() {
    let a = BinaryMask::from_fn(8, 8, |r, c| (2..5).contains(&r) && (2..5).contains(&c));
    let shifted = BinaryMask::from_fn(8, 8, |r, c| (2..5).contains(&r) && (4..7).contains(&c));
    assert_eq!(hd95(&a, &a).unwrap(), 0.0);
    // Every boundary pixel of one square is exactly two columns from the
    // nearest boundary pixel of the other, except where they overlap.
    assert!((hd95(&a, &shifted).unwrap() - brute_hd95(&a, &shifted)).abs() < 1e-12);
    assert_eq!(hd95(&a, &shifted).unwrap(), 2.0);
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |d| BinaryMask::new(h, w, d).unwrap())
}

proptest! {
    #[test]
    fn metrics_are_symmetric_and_bounded(a in mask_strategy(9, 7), b in mask_strategy(9, 7)) {
        let d = dice(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(iou(&a, &b).unwrap() <= d);
        if a.count() > 0 && b.count() > 0 {
            let h = hd95(&a, &b).unwrap();
            prop_assert_eq!(h, hd95(&b, &a).unwrap());
            prop_assert!(h >= 0.0);
        }
    }

    #[test]
    fn self_comparison_is_perfect(a in mask_strategy(6, 6)) {
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        if a.count() > 0 {
            prop_assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        }
    }
}
