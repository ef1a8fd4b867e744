use super::*;
use crate::config::Toggle;
use crate::gradcheck::{max_relative_error, numeric_gradient};
use crate::params::{normal, uniform};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn bce(x: f64, t: bool) -> f64 {
    let p = 1.0 / (1.0 + (-x).exp());
    if t {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[test]
fn gamma_zero_is_binary_cross_entropy() {
    let mut r = rng(1);
    let logits = normal(&[7, 3], 2.0, &mut r);
    let targets = [Some(0), None, Some(2), None, Some(1), Some(1), None];
    let fl = focal_loss(&logits, &targets, &[1.0; 3], 0.0).unwrap();
    let mut expected = 0.0;
    for (q, t) in targets.iter().enumerate() {
        for c in 0..3 {
            expected += bce(logits.data()[q * 3 + c], *t == Some(c));
        }
    }
    assert!((fl - expected).abs() < 1e-6);
}

#[test]
fn confident_correct_prediction_costs_nothing() {
    let l = focal_loss(&Tensor::from_vec(&[1, 2], vec![40.0, -40.0]), &[Some(0)], &[1.0, 1.0], 2.0).unwrap();
    assert!(l < 1e-30);
}

#[test]
fn hand_value_at_probability_point_six() {
    let x = (0.6f64 / 0.4).ln();
    let l = focal_loss(&Tensor::from_vec(&[1, 1], vec![x]), &[Some(0)], &[1.0], 2.0).unwrap();
    // −0.4²·ln 0.6
    assert!((l - 0.08173).abs() < 1e-5);
    assert!((l + 0.16 * 0.6f64.ln()).abs() < 1e-12);
}

#[test]
fn alpha_length_must_match_classes() {
    let err = focal_loss(&Tensor::zeros(&[1, 3]), &[None], &[1.0, 1.0], 2.0).unwrap_err();
    assert!(matches!(err, crate::error::Error::Config(_)));
    let err = resolve_alpha(&AlphaSpec::Explicit(vec![1.0; 2]), &[], 3).unwrap_err();
    assert!(matches!(err, crate::error::Error::Config(_)));
}

#[test]
fn alpha_from_counts() {
    let a = resolve_alpha(&AlphaSpec::Keyword(AlphaKeyword::Auto), &[1, 3], 2).unwrap();
    assert!((a[0] - 1.5).abs() < 1e-12 && (a[1] - 0.5).abs() < 1e-12);
    let a = resolve_alpha(&AlphaSpec::Keyword(AlphaKeyword::Auto), &[10, 10, 10, 10, 10], 5).unwrap();
    assert!(a.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    let a = resolve_alpha(&AlphaSpec::Keyword(AlphaKeyword::Auto), &[4], 1).unwrap();
    assert_eq!(a, vec![1.0]);
    let a = resolve_alpha(&AlphaSpec::Keyword(AlphaKeyword::Uniform), &[], 3).unwrap();
    assert_eq!(a, vec![1.0; 3]);
    // rarer classes weigh more
    let a = resolve_alpha(&AlphaSpec::Keyword(AlphaKeyword::Auto), &[50, 5, 20], 3).unwrap();
    assert!(a[1] > a[2] && a[2] > a[0]);
}

fn prediction(seed: u64, q: usize, c: usize) -> LayerPrediction {
    let mut r = rng(seed);
    let logits = normal(&[q, c], 1.5, &mut r);
    let boxes = uniform(&[q, 4], 0.5, &mut r).map(|v| 0.5 + 0.8 * v);
    LayerPrediction {
        logits: Var::constant(logits),
        boxes: Var::constant(boxes),
    }
}

fn ground_truth() -> BoxSet {
    BoxSet::new(vec![1, 0, 2], vec![[0.3, 0.4, 0.2, 0.3], [0.7, 0.6, 0.3, 0.2], [0.5, 0.5, 0.4, 0.4]]).unwrap()
}

#[test]
fn aux_sums_identical_layers() {
    let p = prediction(2, 8, 3);
    let out = DecoderOutput {
        layers: vec![p.clone(), p.clone()],
        reference: Var::constant(Tensor::zeros(&[8, 2])),
    };
    let config = LossConfig::default();
    let g = Graph::detached();
    let (single, ..) = layer_loss(&g, &p, &ground_truth(), &[1.0; 3], &config, 3.0).unwrap();
    let (total, breakdown) = joint_loss(&g, &out, &ground_truth(), &[1.0; 3], &config, 3.0).unwrap();
    assert!((total.value().item() - 2.0 * single.value().item()).abs() < 1e-12);
    assert_eq!(breakdown.layers.len(), 2);
    let sum: f64 = breakdown.layers.iter().map(|l| l.class + l.l1 + l.giou).sum();
    assert_eq!(breakdown.total, sum);
    let no_aux = LossConfig {
        aux: Toggle::Off,
        ..LossConfig::default()
    };
    let (last_only, b) = joint_loss(&g, &out, &ground_truth(), &[1.0; 3], &no_aux, 3.0).unwrap();
    assert_eq!(b.layers.len(), 1);
    assert!((last_only.value().item() - single.value().item()).abs() < 1e-12);
}

#[test]
fn empty_image_is_pure_background() {
    let p = prediction(3, 5, 2);
    let g = Graph::detached();
    let (total, parts, m) = layer_loss(&g, &p, &BoxSet::default(), &[1.0, 1.0], &LossConfig::default(), 0.0).unwrap();
    assert!(m.query_of.is_empty());
    assert_eq!(parts.l1, 0.0);
    assert_eq!(parts.giou, 0.0);
    let bg = focal_loss(p.logits.value(), &[None; 5], &[1.0, 1.0], 2.0).unwrap();
    assert!((total.value().item() - 2.0 * bg).abs() < 1e-12);
}

#[test]
fn toggles_drop_box_terms() {
    let p = prediction(4, 6, 3);
    let g = Graph::detached();
    let full = layer_loss(&g, &p, &ground_truth(), &[1.0; 3], &LossConfig::default(), 3.0).unwrap().1;
    let no_l1 = LossConfig {
        l1: Toggle::Off,
        ..LossConfig::default()
    };
    let part = layer_loss(&g, &p, &ground_truth(), &[1.0; 3], &no_l1, 3.0).unwrap().1;
    assert_eq!(part.l1, 0.0);
    // matching is unchanged, so the remaining terms are too
    assert_eq!(part.class, full.class);
    assert_eq!(part.giou, full.giou);
    assert!((part.total - (full.class + full.giou)).abs() < 1e-12);
}

#[test]
fn loss_terms_follow_box_loss() {
    // one query, one box: weighted terms add up to the closed-form box loss
    let p = LayerPrediction {
        logits: Var::constant(Tensor::from_vec(&[1, 1], vec![0.0])),
        boxes: Var::constant(Tensor::from_vec(&[1, 4], vec![0.5, 0.5, 0.2, 0.2])),
    };
    let gt = BoxSet::new(vec![0], vec![[0.5, 0.5, 0.4, 0.4]]).unwrap();
    let l = layer_loss(&Graph::detached(), &p, &gt, &[1.0], &LossConfig::default(), 1.0).unwrap().1;
    assert!((l.l1 + l.giou - 3.5).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences_for_fixed_matching() {
    let mut r = rng(5);
    let (q, c) = (6, 3);
    let logits = normal(&[q, c], 1.5, &mut r);
    let boxes = uniform(&[q, 4], 0.3, &mut r).map(|v| 0.5 + v);
    let gt = ground_truth();
    let alpha = [1.3, 0.4, 1.3];
    let config = LossConfig::default();
    let pred = LayerPrediction {
        logits: Var::constant(logits.clone()),
        boxes: Var::constant(boxes.clone()),
    };
    let m = layer_loss(&Graph::detached(), &pred, &gt, &alpha, &config, 3.0).unwrap().2;
    let mut targets = vec![None; q];
    let mut pairs = Vec::new();
    for (gi, &qi) in m.query_of.iter().enumerate() {
        targets[qi] = Some(gt.classes[gi]);
        pairs.push((qi, gt.boxes[gi]));
    }
    let eval = |lg: &Tensor, bx: &Tensor| -> f64 {
        let g = Graph::detached();
        let a = g.focal_loss(&Var::constant(lg.clone()), &targets, &alpha, 2.0, 2.0 / 3.0).unwrap();
        let b = g.l1_box_loss(&Var::constant(bx.clone()), &pairs, 5.0 / 3.0).unwrap();
        let c = g.giou_box_loss(&Var::constant(bx.clone()), &pairs, 2.0 / 3.0).unwrap();
        a.value().item() + b.value().item() + c.value().item()
    };
    let g = Graph::detached();
    let (ll, lb) = (g.leaf(logits.clone()), g.leaf(boxes.clone()));
    let pred = LayerPrediction {
        logits: ll.clone(),
        boxes: lb.clone(),
    };
    let (total, parts, m2) = layer_loss(&g, &pred, &gt, &alpha, &config, 3.0).unwrap();
    assert_eq!(m2.query_of, m.query_of);
    assert!((total.value().item() - eval(&logits, &boxes)).abs() < 1e-12);
    assert!((parts.total - total.value().item()).abs() < 1e-15);
    let grads = g.backward(&total).unwrap();
    let nl = numeric_gradient(&logits, 1e-6, |t| eval(t, &boxes));
    let nb = numeric_gradient(&boxes, 1e-6, |t| eval(&logits, t));
    assert!(max_relative_error(grads.wrt(&ll).unwrap(), &nl, 1e-6) < 1e-4);
    assert!(max_relative_error(grads.wrt(&lb).unwrap(), &nb, 1e-6) < 1e-4);
}

#[test]
fn giou_gradient_in_every_configuration() {
    // overlapping, nested, disjoint and enclosing predictions
    let gt = [0.5, 0.5, 0.3, 0.2];
    for pred in [[0.55, 0.47, 0.3, 0.3], [0.5, 0.52, 0.1, 0.1], [0.1, 0.9, 0.1, 0.05], [0.48, 0.51, 0.6, 0.7]] {
        let t = Tensor::from_vec(&[1, 4], pred.to_vec());
        let g = Graph::detached();
        let v = g.leaf(t.clone());
        let l = g.giou_box_loss(&v, &[(0, gt)], 1.0).unwrap();
        let grads = g.backward(&l).unwrap();
        let n = numeric_gradient(&t, 1e-7, |x| {
            let row = x.data();
            1.0 - crate::boxes::giou([row[0], row[1], row[2], row[3]], gt).unwrap()
        });
        assert!(max_relative_error(grads.wrt(&v).unwrap(), &n, 1e-6) < 1e-5, "{pred:?}");
    }
}

#[test]
fn matching_prefers_the_right_class_and_place() {
    let gt = BoxSet::new(vec![1], vec![[0.3, 0.3, 0.2, 0.2]]).unwrap();
    let logits = Tensor::from_vec(&[3, 2], vec![5.0, -5.0, -5.0, 5.0, -5.0, 5.0]);
    let boxes = Tensor::from_vec(&[3, 4], vec![0.3, 0.3, 0.2, 0.2, 0.8, 0.8, 0.1, 0.1, 0.31, 0.3, 0.2, 0.2]);
    let cost = matching_cost(&logits, &boxes, &gt, &[1.0, 1.0], &LossConfig::default()).unwrap();
    assert_eq!(hungarian_match(&cost).unwrap().query_of, vec![2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn query_order_does_not_change_the_loss(seed in 0u64..10_000) {
        let (q, c) = (7, 3);
        let p = prediction(seed, q, c);
        let mut perm: Vec<usize> = (0..q).collect();
        perm.rotate_left((seed % q as u64) as usize);
        perm.swap(0, q - 1);
        let shuffle = |t: &Tensor, w: usize| {
            let mut o = Tensor::zeros(t.shape());
            for (new, &old) in perm.iter().enumerate() {
                o.data_mut()[new * w..(new + 1) * w].copy_from_slice(t.row(old));
            }
            o
        };
        let moved = LayerPrediction {
            logits: Var::constant(shuffle(p.logits.value(), c)),
            boxes: Var::constant(shuffle(p.boxes.value(), 4)),
        };
        let g = Graph::detached();
        let a = layer_loss(&g, &p, &ground_truth(), &[1.0; 3], &LossConfig::default(), 3.0).unwrap().0;
        let b = layer_loss(&g, &moved, &ground_truth(), &[1.0; 3], &LossConfig::default(), 3.0).unwrap().0;
        prop_assert!((a.value().item() - b.value().item()).abs() < 1e-9);
    }

    #[test]
    fn terms_are_nonnegative(seed in 0u64..10_000) {
        let p = prediction(seed, 5, 3);
        let l = layer_loss(&Graph::detached(), &p, &ground_truth(), &[0.7, 1.1, 1.2], &LossConfig::default(), 3.0).unwrap().1;
        prop_assert!(l.class >= 0.0 && l.l1 >= 0.0 && l.giou >= 0.0);
    }
}
