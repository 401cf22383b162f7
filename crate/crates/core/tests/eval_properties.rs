use frs_autograd::Tensor;
use frs_core::data::GtBox;
use frs_core::detector::{BoxPyramid, DetectorConfig, ScorePyramid};
use frs_core::eval::{average_precision, coco_thresholds, decode_and_nms, iou, mean_ap, nms, DecodeConfig, Detection};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn det(bbox: [f64; 4], category: usize, confidence: f64) -> Detection {
    Detection {
        bbox,
        category,
        confidence,
    }
}

fn gt(category: usize, bbox: [f64; 4]) -> GtBox {
    GtBox { category, bbox }
}

#[test]
fn iou_hand_geometry() {
    let a = [0.0, 0.0, 2.0, 2.0];
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &[3.0, 3.0, 4.0, 4.0]), 0.0);
    assert!((iou(&a, &[1.0, 1.0, 3.0, 3.0]) - 0.142857).abs() < 1e-6);
}

#[test]
fn single_matching_detection_scores_one() {
    let gts = vec![vec![gt(0, [10.0, 10.0, 20.0, 20.0])]];
    let dets = vec![vec![det([10.0, 10.0, 20.0, 20.0], 0, 0.9)]];
    assert_eq!(average_precision(&dets, &gts, 0, 0.5), Some(1.0));
    assert_eq!(average_precision(&[vec![]], &gts, 0, 0.5), Some(0.0));
    assert_eq!(average_precision(&dets, &gts, 1, 0.5), None);
}

#[test]
fn three_image_case_with_a_leading_false_positive() {
    // the FP (image 1, no GT) outranks the only TP; precision at full recall is 1/2
    let gts = vec![vec![gt(0, [0.0, 0.0, 10.0, 10.0])], vec![], vec![gt(1, [5.0, 5.0, 15.0, 15.0])]];
    let dets = vec![
        vec![det([0.0, 0.0, 10.0, 10.0], 0, 0.6)],
        vec![det([30.0, 30.0, 40.0, 40.0], 0, 0.9)],
        vec![],
    ];
    let ap = average_precision(&dets, &gts, 0, 0.5).unwrap();
    assert!((ap - 0.5).abs() < 1e-12, "{ap}");
}

#[test]
fn map_averages_only_classes_with_ground_truth() {
    let gts = vec![vec![gt(0, [0.0, 0.0, 10.0, 10.0])]];
    let dets = vec![vec![det([0.0, 0.0, 10.0, 10.0], 0, 0.9)]];
    let m = mean_ap(&dets, &gts, 3, &coco_thresholds());
    assert_eq!(m.map, 1.0);
    assert_eq!(m.ap50, 1.0);
    assert_eq!(m.ap75, 1.0);
}

#[test]
fn nms_keeps_one_of_two_identical_boxes() {
    let b = [4.0, 4.0, 12.0, 12.0];
    assert_eq!(nms(vec![det(b, 2, 0.7), det(b, 2, 0.8)], 0.5, 100).len(), 1);
}

fn flat_pyramids(cfg: &DetectorConfig, logit: f64) -> (ScorePyramid, BoxPyramid) {
    let c = cfg.num_classes;
    let mut probs = Vec::new();
    let mut boxes = Vec::new();
    for l in 0..cfg.levels() {
        let s = cfg.level_size(l);
        probs.push(Tensor::full(&[1, c, s, s], frs_autograd::sigmoid(logit)));
        boxes.push(Tensor::full(&[1, 4, s, s], 1.0));
    }
    (
        ScorePyramid {
            logits: probs.clone(),
            probs,
        },
        BoxPyramid { levels: boxes },
    )
}

#[test]
fn one_dominant_site_gives_one_detection() {
    let cfg = DetectorConfig::student();
    let (mut scores, boxes) = flat_pyramids(&cfg, -10.0);
    let s = cfg.level_size(1);
    scores.probs[1].data_mut()[2 * s * s + 3 * s + 4] = 0.95;
    let dets = decode_and_nms(&scores, &boxes, 0, &cfg, &DecodeConfig::default());
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].category, 2);
    assert_eq!(dets[0].confidence, 0.95);
    // site (3, 4) at stride 8 has center (36, 28), box ±1 stride
    assert_eq!(dets[0].bbox, [28.0, 20.0, 44.0, 36.0]);
}

#[test]
fn decoded_boxes_stay_inside_the_image() {
    let cfg = DetectorConfig::student();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (mut scores, mut boxes) = flat_pyramids(&cfg, 0.0);
        for t in scores.probs.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        }
        for t in boxes.levels.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.0..6.0));
        }
        let dets = decode_and_nms(&scores, &boxes, 0, &cfg, &DecodeConfig::default());
        assert!(dets.len() <= 100);
        for d in dets {
            let [x1, y1, x2, y2] = d.bbox;
            assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 64.0 && y2 <= 64.0, "{:?}", d.bbox);
            assert!(x1 < x2 && y1 < y2);
        }
    }
}

fn arb_box() -> impl Strategy<Value = [f64; 4]> {
    (0.0f64..50.0, 0.0f64..50.0, 1.0f64..14.0, 1.0f64..14.0).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

fn arb_case() -> impl Strategy<Value = (Vec<Vec<GtBox>>, Vec<Vec<Detection>>)> {
    let image = (
        proptest::collection::vec((0usize..3, arb_box()), 0..4),
        proptest::collection::vec((0usize..3, arb_box(), 0.0f64..1.0), 0..6),
    );
    proptest::collection::vec(image, 1..5).prop_map(|imgs| {
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for (k, (g, d)) in imgs.into_iter().enumerate() {
            gts.push(g.into_iter().map(|(c, b)| gt(c, b)).collect());
            // distinct confidences so the ranking is total
            dets.push(
                d.into_iter()
                    .enumerate()
                    .map(|(i, (c, b, p))| det(b, c, (p + (k * 10 + i) as f64 * 1e-9).min(1.0)))
                    .collect(),
            );
        }
        (gts, dets)
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn map_ignores_detection_order((gts, dets) in arb_case(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = dets.clone();
        for d in shuffled.iter_mut() {
            for i in (1..d.len()).rev() {
                d.swap(i, rng.random_range(0..=i));
            }
        }
        let a = mean_ap(&dets, &gts, 3, &coco_thresholds());
        let b = mean_ap(&shuffled, &gts, 3, &coco_thresholds());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn duplicating_a_matched_detection_never_helps((gts, dets) in arb_case(), pick in any::<prop::sample::Index>(), jitter in 0.0f64..0.5) {
        for class in 0..3 {
            for &t in &[0.5, 0.75] {
                let Some(base) = average_precision(&dets, &gts, class, t) else { continue };
                let matched: Vec<(usize, Detection)> = dets
                    .iter()
                    .enumerate()
                    .flat_map(|(i, ds)| ds.iter().map(move |d| (i, *d)))
                    // exactly one eligible GT, so the copy can only compete for the same one
                    .filter(|(i, d)| {
                        d.category == class
                            && gts[*i].iter().filter(|g| g.category == class && iou(&d.bbox, &g.bbox) >= t).count() == 1
                    })
                    .collect();
                if matched.is_empty() {
                    continue;
                }
                let (img, d) = matched[pick.index(matched.len())];
                let mut more = dets.clone();
                more[img].push(det(d.bbox, d.category, d.confidence * (1.0 - jitter)));
                let after = average_precision(&more, &gts, class, t).unwrap();
                prop_assert!(after <= base + 1e-12, "class {} t {}: {} -> {}", class, t, base, after);
            }
        }
    }
}
