use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn det(image_id: u64, class: usize, bbox: Xyxy, score: f64) -> Detection {
    Detection { image_id, class, bbox, score }
}

fn truth(image_id: u64, items: &[(usize, Xyxy)]) -> ImageTruth {
    ImageTruth {
        image_id,
        classes: items.iter().map(|i| i.0).collect(),
        boxes: items.iter().map(|i| i.1).collect(),
    }
}

fn area(b: &Xyxy) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Direct IoU from corner overlap.
fn oracle_iou(a: &Xyxy, b: &Xyxy) -> f64 {
    let inter = [a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])];
    let i = area(&inter);
    i / (area(a) + area(b) - i)
}

/// Global ranking, exhaustive best-IoU search, interpolated precision taken as
/// the maximum precision at any recall at or above each sample point.
fn oracle_ap(dets: &[Detection], truths: &[ImageTruth], class: usize, thr: f64) -> Option<f64> {
    let npos = truths.iter().flat_map(|t| &t.classes).filter(|&&c| c == class).count();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == class).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut taken = std::collections::HashSet::new();
    let mut curve = Vec::new();
    let mut tp = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        let Some(t) = truths.iter().find(|t| t.image_id == dets[i].image_id) else { continue };
        let mut best: Option<(usize, f64)> = None;
        for k in 0..t.boxes.len() {
            if t.classes[k] != class || taken.contains(&(t.image_id, k)) {
                continue;
            }
            let v = oracle_iou(&dets[i].bbox, &t.boxes[k]);
            if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        if let Some((k, _)) = best {
            taken.insert((t.image_id, k));
            tp += 1.0;
        }
        curve.push((tp / npos as f64, tp / (rank + 1) as f64));
    }
    let mut s = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        s += curve.iter().filter(|c| c.0 >= r - 1e-12).map(|c| c.1).fold(0.0, f64::max);
    }
    Some(s / 101.0)
}

fn random_box(rng: &mut ChaCha8Rng) -> Xyxy {
    let (x, y) = (rng.random_range(0.0..80.0), rng.random_range(0.0..80.0));
    [x, y, x + rng.random_range(5.0..20.0), y + rng.random_range(5.0..20.0)]
}

fn random_scene(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<ImageTruth>) {
    let mut truths = Vec::new();
    let mut dets = Vec::new();
    for id in 0..rng.random_range(1..4u64) {
        let items: Vec<(usize, Xyxy)> = (0..rng.random_range(0..5)).map(|_| (rng.random_range(0..2), random_box(rng))).collect();
        for &(c, b) in &items {
            for _ in 0..rng.random_range(0..3) {
                let j = rng.random_range(-3.0..3.0);
                let cls = if rng.random_bool(0.85) { c } else { 1 - c };
                // coarse scores force ties
                dets.push(det(id, cls, [b[0] + j, b[1], b[2] + j, b[3] - j.abs() / 2.0], (rng.random_range(0..10) as f64) / 10.0));
            }
        }
        for _ in 0..rng.random_range(0..3) {
            dets.push(det(id, rng.random_range(0..2), random_box(rng), rng.random_range(0.0..1.0)));
        }
        truths.push(truth(id, &items));
    }
    (dets, truths)
}

#[test]
fn iou_hand_geometry() {
    let a = [0.0, 0.0, 1.0, 1.0];
    assert_eq!(iou_xyxy(a, a), 1.0);
    assert_eq!(iou_xyxy(a, [2.0, 2.0, 3.0, 3.0]), 0.0);
    assert!((iou_xyxy(a, [0.5, 0.0, 1.5, 1.0]) - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn perfect_detector_scores_one_exactly() {
    let truths = vec![truth(1, &[(0, [10.0, 10.0, 50.0, 40.0]), (1, [60.0, 5.0, 90.0, 30.0])]), truth(2, &[(0, [0.0, 0.0, 20.0, 20.0])])];
    let dets: Vec<Detection> = truths.iter().flat_map(|t| t.classes.iter().zip(&t.boxes).map(|(&c, &b)| det(t.image_id, c, b, 1.0))).collect();
    let m = average_precision(&dets, &truths, 2).unwrap();
    assert_eq!((m.ap, m.ap50, m.ap75), (1.0, 1.0, 1.0));
    assert_eq!(m.per_class_ap, vec![Some(1.0), Some(1.0)]);
}

#[test]
fn no_detections_score_zero() {
    let truths = vec![truth(1, &[(0, [10.0, 10.0, 50.0, 40.0])])];
    let m = average_precision(&[], &truths, 1).unwrap();
    assert_eq!(m.ap, 0.0);
    assert_eq!(m.ap50, 0.0);
}

#[test]
fn false_positive_after_full_recall_costs_nothing() {
    let truths = vec![truth(1, &[(0, [10.0, 10.0, 30.0, 30.0])])];
    let dets = [det(1, 0, [10.0, 10.0, 30.0, 30.0], 0.9), det(1, 0, [60.0, 60.0, 80.0, 80.0], 0.8)];
    assert_eq!(average_precision(&dets, &truths, 1).unwrap().ap50, 1.0);
    // the same false positive ranked first halves precision everywhere
    let dets = [det(1, 0, [10.0, 10.0, 30.0, 30.0], 0.8), det(1, 0, [60.0, 60.0, 80.0, 80.0], 0.9)];
    assert!((average_precision(&dets, &truths, 1).unwrap().ap50 - 0.5).abs() < 1e-12);
}

#[test]
fn classes_without_truth_are_excluded() {
    let truths = vec![truth(1, &[(1, [10.0, 10.0, 30.0, 30.0])])];
    let dets = [det(1, 1, [10.0, 10.0, 30.0, 30.0], 0.9), det(1, 0, [10.0, 10.0, 30.0, 30.0], 0.9)];
    let m = average_precision(&dets, &truths, 3).unwrap();
    assert_eq!(m.per_class_ap, vec![None, Some(1.0), None]);
    assert_eq!(m.ap, 1.0);
}

#[test]
fn each_truth_matches_once() {
    let truths = vec![truth(1, &[(0, [10.0, 10.0, 30.0, 30.0])])];
    let dets = [det(1, 0, [10.0, 10.0, 30.0, 30.0], 0.9), det(1, 0, [10.0, 10.0, 30.0, 30.0], 0.9)];
    // duplicate becomes a false positive after full recall
    assert_eq!(average_precision(&dets, &truths, 1).unwrap().ap50, 1.0);
    assert_eq!(class_ap_at(&dets, &truths, 0, 0.5), Some(1.0));
}

#[test]
fn rejects_bad_detections() {
    let truths = vec![truth(1, &[(0, [10.0, 10.0, 30.0, 30.0])])];
    assert!(average_precision(&[det(1, 0, [0.0, 0.0, 1.0, 1.0], 1.5)], &truths, 1).is_err());
    assert!(average_precision(&[det(1, 0, [2.0, 0.0, 1.0, 1.0], 0.5)], &truths, 1).is_err());
    assert!(average_precision(&[], &[truth(1, &[(4, [0.0, 0.0, 1.0, 1.0])])], 2).is_err());
}

#[test]
fn detections_are_capped_per_image_and_class() {
    let truths = vec![truth(1, &[(0, [10.0, 10.0, 30.0, 30.0])])];
    let mut dets: Vec<Detection> = (0..MAX_DETECTIONS).map(|i| det(1, 0, [50.0, 50.0, 60.0 + i as f64, 60.0], 0.9)).collect();
    dets.push(det(1, 0, [10.0, 10.0, 30.0, 30.0], 0.1));
    assert_eq!(average_precision(&dets, &truths, 1).unwrap().ap50, 0.0);
}

#[test]
fn matches_brute_force_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..20 {
        let (dets, truths) = random_scene(&mut rng);
        let m = average_precision(&dets, &truths, 2).unwrap();
        for c in 0..2 {
            let per_t: Option<Vec<f64>> = iou_thresholds().iter().map(|&t| oracle_ap(&dets, &truths, c, t)).collect();
            let expected = per_t.as_ref().map(|v| v.iter().sum::<f64>() / 10.0);
            match (m.per_class_ap[c], expected) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-6, "{a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
            assert_eq!(m.per_class_ap50[c].is_some(), per_t.is_some());
            if let (Some(a), Some(v)) = (m.per_class_ap50[c], &per_t) {
                assert!((a - v[0]).abs() < 1e-6);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn ap_is_monotone_in_the_threshold(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, truths) = random_scene(&mut rng);
        for c in 0..2 {
            let mut last = f64::INFINITY;
            for t in iou_thresholds() {
                if let Some(v) = class_ap_at(&dets, &truths, c, t) {
                    prop_assert!(v <= last + 1e-12);
                    last = v;
                }
            }
        }
    }

    #[test]
    fn input_order_does_not_matter_for_distinct_scores(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut dets, truths) = random_scene(&mut rng);
        for (i, d) in dets.iter_mut().enumerate() {
            d.score = (d.score + i as f64 * 1e-6).min(1.0);
        }
        let a = average_precision(&dets, &truths, 2).unwrap();
        dets.reverse();
        let b = average_precision(&dets, &truths, 2).unwrap();
        prop_assert!((a.ap - b.ap).abs() < 1e-12);
    }
}
