mod common;

use common::{brute_dice, brute_hd, brute_hd95, random_mask, rng};
use proptest::prelude::*;
use rand::Rng;
use transdae::metrics::{dice, evaluate, hausdorff, mean_foreground_dice, HausdorffKind, LabelMask};

#[test]
fn metrics_match_brute_force_on_random_masks() {
    let mut r = rng(21);
    let mut defined = 0;
    for _ in 0..100 {
        let (h, w) = (r.random_range(1..=32), r.random_range(1..=32));
        let a = random_mask(&mut r, h, w, 4);
        let b = random_mask(&mut r, h, w, 4);
        for cls in 1..4u8 {
            assert!((dice(&a, &b, cls).unwrap() - brute_dice(&a, &b, cls)).abs() <= 1e-12);
            let hd = hausdorff(&a, &b, cls, HausdorffKind::Max).unwrap();
            let hd95 = hausdorff(&a, &b, cls, HausdorffKind::P95).unwrap();
            match (hd, brute_hd(&a, &b, cls)) {
                (Some(x), Some(y)) => {
                    defined += 1;
                    assert!((x - y).abs() <= 1e-12);
                }
                (x, y) => assert_eq!(x, y),
            }
            match (hd95, brute_hd95(&a, &b, cls)) {
                (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-12),
                (x, y) => assert_eq!(x, y),
            }
        }
    }
    assert!(defined > 50, "too few cases with both classes present: {defined}");
}

#[test]
fn self_comparison_is_perfect() {
    let mut r = rng(22);
    for _ in 0..50 {
        let a = random_mask(&mut r, 20, 24, 3);
        for cls in 1..3u8 {
            if a.area(cls) > 0 {
                assert_eq!(dice(&a, &a, cls).unwrap(), 1.0);
                assert_eq!(hausdorff(&a, &a, cls, HausdorffKind::Max).unwrap(), Some(0.0));
                assert_eq!(hausdorff(&a, &a, cls, HausdorffKind::P95).unwrap(), Some(0.0));
            }
        }
        let report = evaluate(std::slice::from_ref(&a), std::slice::from_ref(&a), 3, None).unwrap();
        assert_eq!(report.mean_dice, 1.0);
    }
}

#[test]
fn shifted_square_distances() {
    // 4x4 square moved right by 3: every boundary pixel has a partner at most 3 away
    let square = |x0: usize| LabelMask::from_fn(vec![12, 12], |i| (i / 12 >= 4 && i / 12 < 8 && i % 12 >= x0 && i % 12 < x0 + 4) as u8).unwrap();
    let (a, b) = (square(1), square(4));
    assert_eq!(hausdorff(&a, &b, 1, HausdorffKind::Max).unwrap(), Some(3.0));
    assert_eq!(dice(&a, &b, 1).unwrap(), 2.0 * 4.0 / 32.0);
}

#[test]
fn three_dimensional_boundaries_use_full_neighbourhood() {
    // a 3x3x3 cube in a 5x5x5 volume: only its centre voxel is interior
    let cube = LabelMask::from_fn(vec![5, 5, 5], |i| {
        let (z, y, x) = (i / 25, (i / 5) % 5, i % 5);
        [z, y, x].iter().all(|&c| (1..4).contains(&c)) as u8
    })
    .unwrap();
    assert_eq!(cube.boundary(1).len(), 26);
}

#[test]
fn report_is_ordered_json() {
    let a = LabelMask::new(vec![2, 2], vec![0, 1, 2, 2]).unwrap();
    let b = LabelMask::new(vec![2, 2], vec![0, 1, 1, 2]).unwrap();
    let names: Vec<String> = ["background", "liver", "spleen"].map(String::from).to_vec();
    let report = evaluate(&[a], &[b], 3, Some(&names)).unwrap();
    let json = serde_json::to_string(&report).unwrap();
    let liver = json.find("\"liver\"").unwrap();
    let spleen = json.find("\"spleen\"").unwrap();
    assert!(liver < spleen);
    assert!(!json.contains("background"));
    let back: transdae::metrics::EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
    assert_eq!(report.class("liver").unwrap().dice, 2.0 / 3.0);
}

#[test]
fn evaluation_contracts() {
    let a = LabelMask::new(vec![2, 2], vec![0; 4]).unwrap();
    let b = LabelMask::new(vec![2, 3], vec![0; 6]).unwrap();
    assert!(evaluate(std::slice::from_ref(&a), &[b], 2, None).is_err());
    assert!(evaluate(std::slice::from_ref(&a), &[], 2, None).is_err());
    assert!(mean_foreground_dice(std::slice::from_ref(&a), std::slice::from_ref(&a), 1).is_err());
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_mask(&mut r, 9, 11, 3);
        let b = random_mask(&mut r, 9, 11, 3);
        for cls in 0..3u8 {
            let d = dice(&a, &b, cls).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dice(&b, &a, cls).unwrap());
            let h = hausdorff(&a, &b, cls, HausdorffKind::Max).unwrap();
            let h95 = hausdorff(&a, &b, cls, HausdorffKind::P95).unwrap();
            if let (Some(h), Some(h95)) = (h, h95) {
                prop_assert!(h95 <= h);
            }
        }
    }
}
