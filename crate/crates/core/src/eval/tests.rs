use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::Object;
use crate::suite::oracle::{metric_distance, random_eval_case, report_metrics};
use crate::suite::reference;

fn names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("c{c}")).collect()
}

#[test]
fn iou_matrix_examples() {
    let a = [0.5, 0.5, 0.2, 0.2];
    let m = iou_matrix(
        &[a, [0.1, 0.1, 0.1, 0.1]],
        &[a, [0.6, 0.5, 0.2, 0.2], [0.9, 0.9, 0.1, 0.1]],
    );
    assert_eq!(m.shape(), &[2, 3]);
    assert!((m.data()[0] - 1.0).abs() < 1e-12);
    // Unit squares shifted by half a width: overlap 1/2, union 3/2.
    assert!((m.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(m.data()[2], 0.0);
    assert_eq!(m.data()[5], 0.0);
    assert_eq!(iou_matrix(&[a], &[]).shape(), &[1, 0]);
}

#[test]
fn hand_built_pr_curve() {
    // Two GTs; detections at .9 (hit), .8 (miss), .7 (hit).
    let g = vec![vec![[0.2, 0.2, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]]];
    let d = vec![vec![
        (0.9, [0.2, 0.2, 0.2, 0.2]),
        (0.8, [0.5, 0.2, 0.1, 0.1]),
        (0.7, [0.7, 0.7, 0.2, 0.2]),
    ]];
    let ap = average_precision(&d, &g, 0.5).unwrap();
    // Recall 1/2 at precision 1, then recall 1 at precision 2/3.
    let hand = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
    assert!((ap - hand).abs() < 1e-15, "{ap} vs {hand}");
}

#[test]
fn trivial_ap_cases() {
    let g = vec![vec![[0.3, 0.3, 0.2, 0.2]], vec![[0.6, 0.6, 0.3, 0.1]]];
    let perfect: Vec<Vec<(f64, BoxCxcywh)>> = g
        .iter()
        .map(|gs| gs.iter().map(|&b| (0.5, b)).collect())
        .collect();
    for thr in [0.5, 0.75, 0.95, 1.0] {
        assert_eq!(average_precision(&perfect, &g, thr), Some(1.0));
    }
    assert_eq!(average_precision(&[vec![], vec![]], &g, 0.5), Some(0.0));
    assert_eq!(average_precision(&perfect, &[vec![], vec![]], 0.5), None);
}

#[test]
fn ignored_boxes_absorb_detections() {
    let b = [0.5, 0.5, 0.2, 0.2];
    let im = |ignore| EvalImage {
        detections: vec![Detection {
            class_id: 0,
            score: 0.9,
            bbox: b,
        }],
        gts: vec![
            EvalGt {
                class_id: 0,
                bbox: b,
                ignore,
            },
            EvalGt {
                class_id: 0,
                bbox: [0.1, 0.1, 0.1, 0.1],
                ignore: false,
            },
        ],
    };
    // The first box ignored: the detection on it is neither hit nor miss,
    // and the remaining positive is never found.
    let r = evaluate(&[im(true)], &names(1), 64, 64).unwrap();
    assert_eq!(r.map50, Some(0.0));
    assert_eq!(r.gts, 1);
    let r = evaluate(&[im(false)], &names(1), 64, 64).unwrap();
    assert!((r.map50.unwrap() - 51.0 / 101.0).abs() < 1e-12);
}

#[test]
fn perfect_predictions_and_empty_buckets() {
    let gts = vec![
        EvalGt {
            class_id: 0,
            bbox: [0.3, 0.3, 0.2, 0.2],
            ignore: false,
        },
        EvalGt {
            class_id: 1,
            bbox: [0.6, 0.6, 0.25, 0.3],
            ignore: false,
        },
    ];
    let dets = gts
        .iter()
        .map(|g| Detection {
            class_id: g.class_id,
            score: 1.0,
            bbox: g.bbox,
        })
        .collect();
    let r = evaluate(
        &[EvalImage {
            detections: dets,
            gts,
        }],
        &names(3),
        64,
        64,
    )
    .unwrap();
    assert_eq!(
        (r.map50, r.map50_95, r.map_s),
        (Some(1.0), Some(1.0), Some(1.0))
    );
    // 64 x 64 images hold only small objects.
    assert_eq!((r.map_m, r.map_l), (None, None));
    assert_eq!(r.per_class[2].ap50, None);
    let json = serde_json::to_value(&r).unwrap();
    for k in ["mAP50", "mAP50_95", "mAP_S", "mAP_M", "mAP_L"] {
        assert!(json.get(k).is_some(), "{k}");
    }
    assert!(json["mAP_L"].is_null());
}

#[test]
fn class_vocabulary_must_agree() {
    let im = EvalImage {
        detections: vec![Detection {
            class_id: 4,
            score: 0.5,
            bbox: [0.5; 4],
        }],
        gts: vec![],
    };
    assert!(matches!(
        evaluate(&[im], &names(2), 64, 64),
        Err(Error::Contract(_))
    ));
}

#[test]
fn detections_from_logits_keeps_the_best_pairs() {
    let logits = [0.0, 2.0, -1.0, 3.0];
    let boxes = [0.1, 0.1, 0.1, 0.1, 0.6, 0.6, 0.2, 0.2];
    let d = detections_from_logits(&logits, &boxes, 2, 3);
    assert_eq!(d.len(), 3);
    assert_eq!((d[0].class_id, d[0].bbox[0]), (1, 0.6));
    assert_eq!((d[1].class_id, d[1].bbox[0]), (1, 0.1));
    assert_eq!(d[2].class_id, 0);
    assert!((d[0].score - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-15);
}

#[test]
fn subsets_flag_boxes() {
    let frame = |occ: &[bool]| Frame {
        index: 0,
        image: vec![],
        objects: occ
            .iter()
            .map(|&o| Object {
                class_id: 0,
                bbox: [0.5; 4],
                occluded: o,
            })
            .collect(),
    };
    let mixed = frame(&[true, false]);
    let flags = |s| {
        frame_gts(&mixed, s)
            .unwrap()
            .iter()
            .map(|g| g.ignore)
            .collect::<Vec<_>>()
    };
    assert_eq!(flags(Subset::All), [false, false]);
    assert_eq!(flags(Subset::Visible), [true, false]);
    assert_eq!(flags(Subset::Occluded), [false, true]);
    assert!(frame_gts(&frame(&[false]), Subset::Occluded).is_none());
    assert_eq!("occluded".parse::<Subset>().unwrap(), Subset::Occluded);
}

#[test]
fn matches_scalar_oracle_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let size = 256;
    let mut populated = [0usize; 5];
    for case in 0..50 {
        let classes = rng.gen_range(1..4);
        let images = random_eval_case(&mut rng, classes);
        let r = evaluate(&images, &names(classes), size, size).unwrap();
        let o = reference::map_metrics(&images, classes, (size * size) as f64);
        assert!(
            metric_distance(report_metrics(&r), o) <= 1e-6,
            "case {case}: {:?} vs {o:?}",
            report_metrics(&r)
        );
        for (k, v) in o.iter().enumerate() {
            populated[k] += v.is_some() as usize;
        }
    }
    // Every bucket was exercised.
    assert!(populated.iter().all(|&n| n >= 5), "{populated:?}");
}

#[test]
fn oracle_iou_agrees_with_iou_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let b = |rng: &mut ChaCha8Rng| {
            [
                rng.gen(),
                rng.gen(),
                rng.gen_range(0.01..0.5),
                rng.gen_range(0.01..0.5),
            ]
        };
        let (p, g) = (b(&mut rng), b(&mut rng));
        assert!((iou_matrix(&[p], &[g]).data()[0] - reference::iou(p, g)).abs() < 1e-12);
    }
}

fn case_strategy() -> impl Strategy<Value = (u64, usize)> {
    (any::<u64>(), 1usize..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn monotone_score_transform_is_invariant((seed, classes) in case_strategy()) {
        let images = random_eval_case(&mut ChaCha8Rng::seed_from_u64(seed), classes);
        let squashed: Vec<EvalImage> = images
            .iter()
            .map(|im| EvalImage {
                detections: im.detections.iter().map(|d| Detection { score: (3.0 * d.score).exp() - 7.0, ..*d }).collect(),
                gts: im.gts.clone(),
            })
            .collect();
        let a = evaluate(&images, &names(classes), 256, 256).unwrap();
        let b = evaluate(&squashed, &names(classes), 256, 256).unwrap();
        prop_assert_eq!(report_metrics(&a), report_metrics(&b));
    }

    #[test]
    fn map50_dominates_map50_95((seed, classes) in case_strategy()) {
        let images = random_eval_case(&mut ChaCha8Rng::seed_from_u64(seed), classes);
        let r = evaluate(&images, &names(classes), 256, 256).unwrap();
        if let (Some(a), Some(b)) = (r.map50, r.map50_95) {
            prop_assert!(a >= b);
        }
        for v in report_metrics(&r).into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn detection_order_is_irrelevant((seed, classes) in case_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = random_eval_case(&mut rng, classes);
        let mut shuffled = images.clone();
        for im in &mut shuffled {
            for i in (1..im.detections.len()).rev() {
                im.detections.swap(i, rng.gen_range(0..=i));
            }
        }
        let a = evaluate(&images, &names(classes), 256, 256).unwrap();
        let b = evaluate(&shuffled, &names(classes), 256, 256).unwrap();
        prop_assert_eq!(a, b);
    }
}
