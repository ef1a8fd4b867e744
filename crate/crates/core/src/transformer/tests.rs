use super::*;
use crate::config::{AttnConfig, DepthConfig};
use crate::gradcheck::{max_relative_error, numeric_gradient};
use proptest::prelude::*;
use rand::SeedableRng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_config(enc: usize, dec: usize) -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        d_model: 8,
        d_ffn: 16,
        dropout: 0.0,
        num_queries: 6,
        attn: AttnConfig {
            heads: 2,
            points: 2,
            levels: 4,
        },
        enc: DepthConfig { layers: enc },
        dec: DepthConfig { layers: dec },
        ..ModelConfig::default()
    }
}

fn shapes() -> LevelShapes {
    LevelShapes::new(vec![(4, 6), (2, 3), (1, 2), (1, 1)])
}

#[test]
fn token_count_for_a_256_pyramid() {
    let s = LevelShapes::new(vec![(32, 32), (16, 16), (8, 8), (4, 4)]);
    assert_eq!(s.total(), 1360);
    let config = small_config(1, 1);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng(0), &config).unwrap();
    let src = Var::constant(normal(&[1360, 8], 1.0, &mut rng(1)));
    let out = enc.forward(&Graph::inference(&store), &src, None, &s, &vec![false; 1360]).unwrap();
    assert_eq!(out.shape(), &[1360, 8]);
    assert!(out.value().is_finite());
}

#[test]
fn empty_encoder_is_identity() {
    let config = small_config(0, 1);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng(0), &config).unwrap();
    let s = shapes();
    let src = Var::constant(normal(&[s.total(), 8], 1.0, &mut rng(1)));
    let out = enc.forward(&Graph::inference(&store), &src, None, &s, &vec![false; s.total()]).unwrap();
    assert_eq!(out.value().data(), src.value().data());
}

#[test]
fn encoder_reference_points_are_cell_centres() {
    let s = shapes();
    let r = encoder_reference_points(&s);
    assert_eq!(r.shape(), &[s.total(), 4, 2]);
    // token at (i, j) = (3, 1) of the 4x6 level, replicated on all levels
    let t = 3 * 6 + 1;
    for l in 0..4 {
        assert_eq!(r.data()[(t * 4 + l) * 2], 1.5 / 6.0);
        assert_eq!(r.data()[(t * 4 + l) * 2 + 1], 3.5 / 4.0);
    }
    // first token of the 1x2 level: (0.25, 0.5)
    let t = 24 + 6;
    assert_eq!(&r.data()[t * 8..t * 8 + 2], &[0.25, 0.5]);
}

#[test]
fn valid_ratios_measure_content() {
    let s = LevelShapes::new(vec![(4, 4), (2, 2)]);
    let mut padding = vec![false; 20];
    for i in 0..4 {
        padding[i * 4 + 3] = true;
    }
    for p in 8..16 {
        padding[p] = true;
    }
    padding[17] = true;
    padding[19] = true;
    assert_eq!(valid_ratios(&s, &padding), vec![(0.75, 0.5), (0.5, 1.0)]);
}

#[test]
fn ffn_zero_in_zero_out() {
    let mut store = ParamStore::new();
    let ffn = Ffn::new(&mut store, &mut rng(0), "ffn", 4, 8, 0.0).unwrap();
    let out = ffn.forward(&Graph::inference(&store), &Var::constant(Tensor::zeros(&[3, 4]))).unwrap();
    assert!(out.value().data().iter().all(|&v| v == 0.0));
    let out = ffn
        .forward(&Graph::inference(&store), &Var::constant(normal(&[5, 4], 1.0, &mut rng(1))))
        .unwrap();
    assert_eq!(out.shape(), &[5, 4]);
}

#[test]
fn ffn_identity_construction() {
    // relu(x) − relu(−x) = x with d_ffn = 2d
    let d = 4;
    let mut store = ParamStore::new();
    let ffn = Ffn::new(&mut store, &mut rng(0), "ffn", d, 2 * d, 0.0).unwrap();
    let mut w1 = Tensor::zeros(&[2 * d, d]);
    let mut w2 = Tensor::zeros(&[d, 2 * d]);
    for i in 0..d {
        w1.data_mut()[i * d + i] = 1.0;
        w1.data_mut()[(d + i) * d + i] = -1.0;
        w2.data_mut()[i * 2 * d + i] = 1.0;
        w2.data_mut()[i * 2 * d + d + i] = -1.0;
    }
    store.set("ffn.linear1.weight", w1).unwrap();
    store.set("ffn.linear2.weight", w2).unwrap();
    let x = normal(&[6, d], 2.0, &mut rng(1));
    let out = ffn.forward(&Graph::inference(&store), &Var::constant(x.clone())).unwrap();
    assert!(out.value().max_abs_diff(&x) < 1e-12);
}

#[test]
fn add_and_norm_keeps_token_variance_sane() {
    let config = small_config(3, 1);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng(2), &config).unwrap();
    let s = shapes();
    let src = Var::constant(normal(&[s.total(), 8], 1.0, &mut rng(3)));
    let (_, trace) = enc
        .forward_traced(&Graph::inference(&store), &src, None, &s, &vec![false; s.total()])
        .unwrap();
    assert_eq!(trace.len(), 6);
    for act in &trace {
        assert!(act.value().is_finite());
        for r in 0..s.total() {
            let row = act.value().row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!((0.1..=10.0).contains(&var), "variance {var}");
        }
    }
}

fn decoder_run(store: &ParamStore, dec: &Decoder, memory: &Tensor) -> DecoderOutput {
    let s = shapes();
    let padding = vec![false; s.total()];
    let ratios = valid_ratios(&s, &padding);
    dec.forward(&Graph::inference(store), &Var::constant(memory.clone()), &s, &padding, &ratios)
        .unwrap()
}

#[test]
fn decoder_emits_one_prediction_per_layer() {
    let config = small_config(1, 6);
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, &mut rng(4), &config).unwrap();
    let out = decoder_run(&store, &dec, &normal(&[shapes().total(), 8], 1.0, &mut rng(5)));
    assert_eq!(out.layers.len(), 6);
    for p in &out.layers {
        assert_eq!(p.logits.shape(), &[6, 3]);
        assert_eq!(p.boxes.shape(), &[6, 4]);
    }
    assert!(store.get("class_embed.bias").unwrap().data().iter().all(|&v| v == CLASS_PRIOR_BIAS));
    // initial boxes sit at the reference point with sigmoid(−2) extent
    let b = out.last().boxes.value();
    let r = out.reference.value();
    for q in 0..6 {
        assert!((b.data()[q * 4] - r.data()[q * 2]).abs() < 1e-9);
        assert!((b.data()[q * 4 + 2] - math::sigmoid(-2.0)).abs() < 1e-12);
    }
}

#[test]
fn decoder_rejects_non_finite_memory() {
    let config = small_config(1, 1);
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, &mut rng(4), &config).unwrap();
    let s = shapes();
    let mut m = Tensor::zeros(&[s.total(), 8]);
    m.data_mut()[3] = f64::INFINITY;
    let padding = vec![false; s.total()];
    let ratios = valid_ratios(&s, &padding);
    assert!(dec.forward(&Graph::inference(&store), &Var::constant(m), &s, &padding, &ratios).is_err());
}

#[test]
fn permuting_queries_permutes_predictions() {
    let config = small_config(1, 3);
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, &mut rng(6), &config).unwrap();
    // non-trivial heads so every output depends on the query
    let mut r = rng(7);
    store.set("bbox_embed.layers.2.weight", normal(&[4, 8], 0.3, &mut r)).unwrap();
    let memory = normal(&[shapes().total(), 8], 1.0, &mut r);
    let base = decoder_run(&store, &dec, &memory);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let embed = store.get("transformer.query_embed").unwrap().clone();
    let mut permuted = Tensor::zeros(embed.shape());
    for (new, &old) in perm.iter().enumerate() {
        permuted.data_mut()[new * 16..(new + 1) * 16].copy_from_slice(embed.row(old));
    }
    store.set("transformer.query_embed", permuted).unwrap();
    let moved = decoder_run(&store, &dec, &memory);
    for (a, b) in base.layers.iter().zip(&moved.layers) {
        for (new, &old) in perm.iter().enumerate() {
            for (x, y) in a.boxes.value().row(old).iter().zip(b.boxes.value().row(new)) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in a.logits.value().row(old).iter().zip(b.logits.value().row(new)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn depth_grid_runs_end_to_end() {
    let s = shapes();
    let padding = vec![false; s.total()];
    for enc_layers in [0, 1, 3, 6] {
        for dec_layers in [1, 3, 6] {
            let config = small_config(enc_layers, dec_layers);
            let mut store = ParamStore::new();
            let enc = Encoder::new(&mut store, &mut rng(8), &config).unwrap();
            let dec = Decoder::new(&mut store, &mut rng(9), &config).unwrap();
            let g = Graph::new(&store);
            let src = Var::constant(normal(&[s.total(), 8], 1.0, &mut rng(10)));
            let memory = enc.forward(&g, &src, None, &s, &padding).unwrap();
            let out = dec.forward(&g, &memory, &s, &padding, &valid_ratios(&s, &padding)).unwrap();
            assert_eq!(out.layers.len(), dec_layers);
            let loss = g.sum(&out.last().boxes);
            let grads = g.backward(&loss).unwrap();
            assert!(grads.param("transformer.query_embed").is_some());
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let config = small_config(2, 1);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng(11), &config).unwrap();
    let mut r = rng(12);
    for (name, p) in store.iter_mut() {
        if name.contains("attention_weights.weight") || name.contains("sampling_offsets.weight") {
            *p.value_mut() = normal(p.value().shape(), 0.3, &mut r);
        }
    }
    let s = LevelShapes::new(vec![(3, 3), (2, 2), (1, 2), (1, 1)]);
    let padding = vec![false; s.total()];
    let src = normal(&[s.total(), 8], 1.0, &mut r);
    let pos = normal(&[s.total(), 8], 0.5, &mut r);
    let coef = Tensor::from_vec(&[s.total(), 8], (0..s.total() * 8).map(|j| math::sin(0.731 * j as f64 + 0.3)).collect());
    let g = Graph::new(&store);
    let x = g.leaf(src.clone());
    let out = enc.forward(&g, &x, Some(&Var::constant(pos.clone())), &s, &padding).unwrap();
    let grads = g.backward(&g.sum(&g.mul_const(&out, &coef).unwrap())).unwrap();
    let numeric = numeric_gradient(&src, 1e-6, |t| {
        let out = enc
            .forward(&Graph::inference(&store), &Var::constant(t.clone()), Some(&Var::constant(pos.clone())), &s, &padding)
            .unwrap();
        out.value().data().iter().zip(coef.data()).map(|(a, b)| a * b).sum()
    });
    assert!(max_relative_error(grads.wrt(&x).unwrap(), &numeric, 1e-6) < 1e-4);
}

#[test]
fn box_and_level_ops_gradients() {
    let mut r = rng(13);
    let delta = normal(&[3, 4], 1.0, &mut r);
    let refs = crate::params::uniform(&[3, 2], 0.4, &mut r).map(|v| v + 0.5);
    let ratios = [(0.5, 1.0), (0.75, 0.8)];
    let coef: Vec<f64> = (0..12).map(|j| math::cos(0.3 * j as f64)).collect();
    let coef2: Vec<f64> = (0..12).map(|j| math::sin(0.7 * j as f64)).collect();
    let f = |d: &Tensor, rf: &Tensor| -> f64 {
        let g = Graph::detached();
        let b = g.boxes_from_deltas(&Var::constant(d.clone()), &Var::constant(rf.clone())).unwrap();
        let e = g.expand_levels(&Var::constant(rf.clone()), &ratios).unwrap();
        b.value().data().iter().zip(&coef).map(|(a, c)| a * c).sum::<f64>()
            + e.value().data().iter().zip(&coef2).map(|(a, c)| a * c).sum::<f64>()
    };
    let g = Graph::detached();
    let (ld, lr) = (g.leaf(delta.clone()), g.leaf(refs.clone()));
    let b = g.boxes_from_deltas(&ld, &lr).unwrap();
    let e = g.expand_levels(&lr, &ratios).unwrap();
    let loss = g.add_scalars(&[
        &g.sum(&g.mul_const(&b, &Tensor::from_vec(&[3, 4], coef.clone())).unwrap()),
        &g.sum(&g.mul_const(&e, &Tensor::from_vec(&[3, 2, 2], coef2.clone())).unwrap()),
    ]);
    let grads = g.backward(&loss).unwrap();
    let nd = numeric_gradient(&delta, 1e-6, |t| f(t, &refs));
    let nr = numeric_gradient(&refs, 1e-6, |t| f(&delta, t));
    assert!(max_relative_error(grads.wrt(&ld).unwrap(), &nd, 1e-7) < 1e-6);
    assert!(max_relative_error(grads.wrt(&lr).unwrap(), &nr, 1e-7) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn boxes_stay_inside_the_unit_interval(seed in 0u64..u64::MAX, scale in 0.0f64..30.0) {
        let mut r = rng(seed);
        let delta = normal(&[5, 4], scale, &mut r);
        let refs = crate::params::uniform(&[5, 2], 0.5, &mut r).map(|v| v + 0.5);
        let b = Graph::detached().boxes_from_deltas(&Var::constant(delta), &Var::constant(refs)).unwrap();
        prop_assert!(b.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
