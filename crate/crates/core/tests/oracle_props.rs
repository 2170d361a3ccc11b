mod common;

use gazekit_core::detector::nms;
use gazekit_core::enhance::build_identity_maps;
use gazekit_core::eval::{evaluate, match_detections};
use gazekit_core::{iou, BBox};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bbox() -> impl Strategy<Value = BBox> {
    (-20.0..120.0f64, -20.0..120.0f64, 0.0..80.0f64, 0.0..80.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

proptest! {
    #[test]
    fn iou_matches_corner_formula(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert!((v - common::oracle_iou(&a, &b)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - iou(&b, &a)).abs() < 1e-15);
    }

    #[test]
    fn nms_equals_exhaustive_reference(seed in any::<u64>()) {
        let (boxes, scores, t) = common::random_nms_instance(&mut ChaCha8Rng::seed_from_u64(seed), 10);
        let kept = nms(&boxes, &scores, t);
        prop_assert_eq!(&kept, &common::oracle_nms(&boxes, &scores, t));
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                prop_assert!(iou(&boxes[a], &boxes[b]) <= t);
            }
        }
    }

    #[test]
    fn identity_maps_equal_point_in_box(seed in any::<u64>(), size in 1usize..48) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = common::random_map_boxes(&mut rng, size);
        let l = common::random_map_boxes(&mut rng, size);
        let maps = build_identity_maps(&s, &l, size as i64, size as i64).unwrap();
        prop_assert_eq!(maps.speaker, common::oracle_map(&s, size, size));
        prop_assert_eq!(maps.listener, common::oracle_map(&l, size, size));
    }

    #[test]
    fn ap_equals_brute_force_greedy(seed in any::<u64>()) {
        let (dets, gts) = common::random_ap_instance(&mut ChaCha8Rng::seed_from_u64(seed), 8);
        let (flags, ap) = common::oracle_ap(&dets, &gts, 0.5);
        prop_assert_eq!(match_detections(&dets, &gts, 0.5), flags);
        let got = evaluate(&dets, &gts, 0.5).unwrap().ap;
        prop_assert!((got - ap).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn non_positive_map_sizes_are_rejected() {
    assert!(build_identity_maps(&[], &[], 0, 4).is_err());
    assert!(build_identity_maps(&[], &[], 4, -1).is_err());
}
