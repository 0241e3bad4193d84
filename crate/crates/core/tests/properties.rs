use layerloc_core::detect::{
    box_iou, decode_predictions, encode_targets, nms, BoxF, Detection, GridPrediction, ObjectBox,
};
use layerloc_core::explain::{gaussian_smooth, AttributionMap, Method};
use layerloc_core::metrics::{
    binarize_percentile, covered_count, granulometry, iou, BinaryMask, MaskOrigin,
};
use layerloc_core::training::make_split_plan;
use proptest::prelude::*;

fn mask_strategy(max: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), h * w)
            .prop_map(move |bits| BinaryMask::new(h, w, bits, MaskOrigin::Other).unwrap())
    })
}

/// Opening by a (2r+1) square, straight from the definition: a pixel survives
/// if some fully-foreground in-bounds-clipped window that contains it exists.
fn naive_opening(m: &BinaryMask, r: usize) -> BinaryMask {
    let (h, w) = (m.h as isize, m.w as isize);
    let r = r as isize;
    let eroded: Vec<bool> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| {
            let mut all = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && yy < h && xx >= 0 && xx < w && !m.get(yy as usize, xx as usize) {
                        all = false;
                    }
                }
            }
            all
        })
        .collect();
    let mut out = vec![false; m.bits.len()];
    for y in 0..h {
        for x in 0..w {
            let mut any = false;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && yy < h && xx >= 0 && xx < w && eroded[(yy * w + xx) as usize] {
                        any = true;
                    }
                }
            }
            out[(y * w + x) as usize] = any;
        }
    }
    BinaryMask::new(m.h, m.w, out, m.origin).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn binarize_keeps_exact_count(
        (h, w, values) in (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(prop_oneof![Just(0.5), -3.0..3.0f64], h * w))
        }),
        p in 0.5f64..99.5,
    ) {
        let m = binarize_percentile(&values, h, w, p).unwrap();
        prop_assert_eq!(m.area(), covered_count(h * w, p));
        let exact = (1.0 - p / 100.0) * (h * w) as f64;
        prop_assert!((m.area() as f64 - exact.ceil()).abs() <= 1.0);
        // every kept value is at least every dropped value
        let kept_min = values.iter().zip(&m.bits).filter(|(_, &b)| b).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        let drop_max = values.iter().zip(&m.bits).filter(|(_, &b)| !b).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(kept_min >= drop_max);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in mask_strategy(12), seed in any::<u64>()) {
        let mut rng = layerloc_core::Rng::new(seed);
        let bits = (0..a.bits.len()).map(|_| rng.bernoulli(0.5)).collect();
        let b = BinaryMask::new(a.h, a.w, bits, MaskOrigin::Other).unwrap();
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        if a.area() > 0 {
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn granulometry_matches_naive_openings(m in mask_strategy(16), max in 1usize..5) {
        let s = granulometry(&m, max).unwrap();
        prop_assert_eq!(s.removed.iter().sum::<usize>(), m.area());
        let mut prev = m.area();
        for size in 1..=max {
            let area = naive_opening(&m, size).area();
            prop_assert!(area <= prev);
            let expected = if size == max { prev } else { prev - area };
            prop_assert_eq!(s.removed[size - 1], expected, "size {}", size);
            prev = area;
        }
    }

    #[test]
    fn smoothing_preserves_mass_and_sign(
        (h, w, values) in (1usize..16, 1usize..16).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(0.0..1.0f64, h * w))
        }),
        sigma in 0.0f64..4.0,
    ) {
        let map = AttributionMap { h, w, values: values.clone(), method: Method::GradCam, tap: 1, class: 0 };
        let out = gaussian_smooth(&map, sigma).unwrap();
        let before: f64 = values.iter().sum();
        let after: f64 = out.values.iter().sum();
        prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
        prop_assert!(out.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn target_round_trip(s in 1usize..8, fx in 0.0f64..0.9, fy in 0.0f64..0.9, fw in 0.05f64..1.0, fh in 0.05f64..1.0, class in 0usize..3) {
        let (ih, iw) = (32.0, 48.0);
        let (x, y) = (fx * iw, fy * ih);
        let bbox = BoxF { x, y, w: fw * (iw - x), h: fh * (ih - y) };
        let (ih, iw) = (32usize, 48usize);
        let t = encode_targets(&[ObjectBox { bbox, class }], s, (ih, iw)).unwrap();
        prop_assert_eq!(t.responsible_count(), 1);
        let pred = GridPrediction::from_target(&t, 2, 3);
        let dets = decode_predictions(&pred, (ih, iw), 0.5);
        prop_assert_eq!(dets.len(), 1);
        prop_assert_eq!(dets[0].class, class);
        prop_assert!(box_iou(&dets[0].bbox, &bbox) > 1.0 - 1e-9);
    }

    #[test]
    fn nms_output_is_a_non_overlapping_subset(
        raw in prop::collection::vec((0.0..20.0f64, 0.0..20.0f64, 1.0..10.0f64, 1.0..10.0f64, 0usize..2, 0.0..1.0f64), 0..25),
        thr in 0.1f64..0.9,
    ) {
        let dets: Vec<Detection> = raw.iter()
            .map(|&(x, y, w, h, class, score)| Detection { bbox: BoxF { x, y, w, h }, class, score })
            .collect();
        let kept = nms(&dets, thr);
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class != b.class || box_iou(&a.bbox, &b.bbox) <= thr);
            }
        }
        // the top-scoring detection of each class always survives
        for c in 0..2 {
            if let Some(best) = dets.iter().filter(|d| d.class == c).max_by(|a, b| a.score.total_cmp(&b.score)) {
                prop_assert!(kept.iter().any(|k| k.class == c && k.score == best.score));
            }
        }
    }

    #[test]
    fn box_iou_symmetric(a in (0.0..10.0f64, 0.0..10.0f64, 0.1..10.0f64, 0.1..10.0f64), b in (0.0..10.0f64, 0.0..10.0f64, 0.1..10.0f64, 0.1..10.0f64)) {
        let a = BoxF { x: a.0, y: a.1, w: a.2, h: a.3 };
        let b = BoxF { x: b.0, y: b.1, w: b.2, h: b.3 };
        let v = box_iou(&a, &b);
        prop_assert!((v - box_iou(&b, &a)).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn split_plans_partition_every_tap_range() {
    for taps in 1..=12 {
        for k in 1..=taps {
            let plan = make_split_plan(taps, k).unwrap();
            assert_eq!(plan.len(), k);
            let mut next = 1;
            let sizes: Vec<usize> = plan.parts().iter().map(|p| p.len()).collect();
            for p in plan.parts() {
                assert_eq!(p.start, next);
                assert!(!p.is_empty());
                next = p.end;
            }
            assert_eq!(next, taps + 1);
            // near-equal, larger parts first
            assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
            assert!(sizes[0] - sizes[k - 1] <= 1);
        }
        assert!(make_split_plan(taps, 0).is_err());
        assert!(make_split_plan(taps, taps + 1).is_err());
    }
}
