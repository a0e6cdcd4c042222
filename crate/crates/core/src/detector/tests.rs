use proptest::prelude::*;

use super::*;
use crate::geometry::{AnchorSet, BBox};
use crate::image::Image;
use crate::numerics::{gradient_check, CheckOptions, Probe};

fn bind_all(g: &mut Graph, pair: &ModelPair) -> Binding {
    let mut b = Binding::new();
    b.bind_side(g, &pair.params, Side::Online, true);
    b.bind_side(g, &pair.params, Side::Target, false);
    b
}

#[test]
fn pyramid_shapes_follow_strides() {
    let pair = ModelPair::new(ModelConfig::default(), 1).unwrap();
    let mut g = Graph::inference();
    let b = bind_all(&mut g, &pair);
    let img = Image::from_fn(224, 224, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0);
    let x = image_input(&mut g, &img).unwrap();
    let fp = extract(&mut g, &b, Side::Online, &pair.config, x, 4).unwrap();
    let shapes: Vec<Vec<usize>> = fp.levels.iter().map(|&v| g.shape(v).to_vec()).collect();
    assert_eq!(shapes, vec![vec![32, 56, 56], vec![32, 28, 28], vec![32, 14, 14], vec![32, 7, 7]]);

    let rpn = rpn_forward(&mut g, &b, &pair.config, &fp).unwrap();
    assert_eq!(rpn.anchors.len(), 12_495);
    assert_eq!(g.shape(rpn.logits), [12_495]);
    assert_eq!(g.shape(rpn.deltas), [4 * 12_495]);
    assert_eq!(g.shape(rpn.per_level[0].0), [3, 56, 56]);
    assert_eq!(g.shape(rpn.per_level[0].1), [12, 56, 56]);
    assert_eq!(rpn.anchors.levels[0].boxes.len(), 9408);
}

#[test]
fn small_views_use_three_levels() {
    let pair = ModelPair::new(ModelConfig::tiny(), 1).unwrap();
    let mut g = Graph::inference();
    let b = bind_all(&mut g, &pair);
    let x = image_input(&mut g, &Image::filled(112, 112, 3, 0.5)).unwrap();
    assert!(extract(&mut g, &b, Side::Target, &pair.config, x, 4).is_err());
    let fp = extract(&mut g, &b, Side::Target, &pair.config, x, 3).unwrap();
    let sides: Vec<usize> = fp.levels.iter().map(|&v| g.shape(v)[1]).collect();
    assert_eq!(sides, vec![28, 14, 7]);
    let odd = image_input(&mut g, &Image::filled(100, 100, 3, 0.5)).unwrap();
    assert!(matches!(extract(&mut g, &b, Side::Online, &pair.config, odd, 3), Err(Error::InvalidShape { .. })));
}

#[test]
fn zero_image_gives_zero_pyramid_and_even_odds() {
    let pair = ModelPair::new(ModelConfig::tiny(), 3).unwrap();
    let mut g = Graph::inference();
    let b = bind_all(&mut g, &pair);
    let x = image_input(&mut g, &Image::filled(64, 64, 3, 0.0)).unwrap();
    let fp = extract(&mut g, &b, Side::Online, &pair.config, x, 4).unwrap();
    for &l in &fp.levels {
        assert!(g.data(l).iter().all(|&v| v == 0.0));
    }
    let rpn = rpn_forward(&mut g, &b, &pair.config, &fp).unwrap();
    assert!(g.data(rpn.logits).iter().all(|&v| v == 0.0));
    assert!(g.data(rpn.logits).iter().all(|&v| crate::numerics::graph::sigmoid(v) == 0.5));
}

#[test]
fn equal_logits_take_scan_order() {
    let anchors = AnchorSet::generate(&Default::default(), 64, 64, 4).unwrap();
    let n = anchors.len();
    let logits = vec![0.0; n];
    let deltas = vec![0.0; 4 * n];
    let opts = ProposeOptions { pre_nms_top: 64, nms_threshold: 0.7, k: 1000 };
    let out = propose_from_outputs(&anchors, &logits, &deltas, 64, 64, &opts).unwrap();
    // oracle: clipped anchors in scan order, first 64 survivors, greedy NMS
    let first: Vec<BBox> = anchors.iter().filter_map(|a| a.clip(64.0, 64.0, 1.0)).take(64).collect();
    let mut expect: Vec<BBox> = Vec::new();
    for b in first {
        if expect.iter().all(|e| crate::geometry::iou(e, &b) <= 0.7) {
            expect.push(b);
        }
    }
    assert_eq!(out.len(), expect.len());
    for (o, e) in out.iter().zip(&expect) {
        assert!(o.coords().iter().zip(e.coords()).all(|(a, b)| (a - b).abs() < 1e-9), "{o} vs {e}");
    }
}

#[test]
fn single_confident_anchor_leads() {
    let anchors = AnchorSet::generate(&Default::default(), 64, 64, 4).unwrap();
    let n = anchors.len();
    let target = 3 * (8 * 16 + 8) + 1; // p2, row 8, col 8, square anchor
    let mut logits = vec![-10.0; n];
    logits[target] = 10.0;
    let out = propose_from_outputs(&anchors, &logits, &vec![0.0; 4 * n], 64, 64, &ProposeOptions::default()).unwrap();
    let a = anchors.iter().nth(target).unwrap();
    assert!(out[0].same_coords(a));
    assert!(out.len() <= 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn proposals_are_in_bounds(seed in any::<u64>(), k in 1usize..20) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let anchors = AnchorSet::generate(&Default::default(), 64, 96, 4).unwrap();
        let n = anchors.len();
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let deltas: Vec<f64> = (0..4 * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let out = propose_from_outputs(&anchors, &logits, &deltas, 64, 96, &ProposeOptions { k, ..Default::default() }).unwrap();
        prop_assert!(out.len() <= k);
        for b in &out {
            prop_assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 96.0 && b.y2 <= 64.0);
            prop_assert!(b.width() >= 1.0 && b.height() >= 1.0);
        }
    }
}

#[test]
fn roi_align_examples() {
    let mut g = Graph::new();
    let f = g.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let whole = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let r = roi_align(&mut g, f, &whole, 1.0, 1, 1).unwrap();
    assert_eq!(g.data(r), &[1.5]);

    let c = g.constant(Tensor::full(&[2, 9, 9], 0.25));
    let b = BBox::new(3.3, 1.7, 30.1, 22.9).unwrap();
    let r = roi_align(&mut g, c, &b, 4.0, 7, 2).unwrap();
    assert_eq!(g.shape(r), [2, 7, 7]);
    assert!(g.data(r).iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn roi_align_is_linear() {
    let f1: Vec<f64> = (0..2 * 8 * 8).map(|i| ((i * 37) % 17) as f64 / 7.0).collect();
    let f2: Vec<f64> = (0..2 * 8 * 8).map(|i| ((i * 11) % 13) as f64 - 6.0).collect();
    let b = BBox::new(2.5, 4.0, 27.0, 30.5).unwrap();
    let pool = |data: Vec<f64>| {
        let mut g = Graph::inference();
        let f = g.constant(Tensor::new(vec![2, 8, 8], data).unwrap());
        let r = roi_align(&mut g, f, &b, 4.0, 7, 2).unwrap();
        g.data(r).to_vec()
    };
    let (a, c) = (1.7, -0.4);
    let mixed = pool(f1.iter().zip(&f2).map(|(x, y)| a * x + c * y).collect());
    let (p1, p2) = (pool(f1), pool(f2));
    for i in 0..mixed.len() {
        assert!((mixed[i] - (a * p1[i] + c * p2[i])).abs() < 1e-12);
    }
}

#[test]
fn roi_align_gradient_matches_finite_differences() {
    let b = BBox::new(1.3, 2.2, 20.9, 17.4).unwrap();
    let weights: Vec<f64> = (0..2 * 9).map(|i| (i as f64 * 0.37).sin()).collect();
    let f = |x: &[f64], want: bool| -> crate::Result<Probe> {
        let mut g = Graph::new();
        let feat = g.param(Tensor::new(vec![2, 6, 6], x.to_vec())?);
        let r = roi_align(&mut g, feat, &b, 4.0, 3, 2)?;
        let w = g.constant(Tensor::new(vec![2, 3, 3], weights.clone())?);
        let prod = g.mul(r, w)?;
        let loss = g.sum(prod);
        let value = g.item(loss);
        let signature = g.kink_signature();
        let grad = if want { Some(g.backward(loss)?.get_or_zeros(feat, x.len())) } else { None };
        Ok(Probe { value, signature, grad })
    };
    let x: Vec<f64> = (0..72).map(|i| (i as f64 * 0.71).cos()).collect();
    let r = gradient_check(f, &x, &CheckOptions::default()).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn roi_level_clamps_to_available_levels() {
    let big = BBox::new(0.0, 0.0, 224.0, 224.0).unwrap();
    assert_eq!(roi_level(&big, 4), 2);
    assert_eq!(roi_level(&big, 3), 2);
    assert_eq!(roi_level(&BBox::new(0.0, 0.0, 500.0, 500.0).unwrap(), 3), 2);
    assert_eq!(roi_level(&BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), 4), 0);
}

#[test]
fn head_embed_examples() {
    let cfg = ModelConfig::tiny();
    let pair = ModelPair::new(cfg.clone(), 5).unwrap();
    let mut g = Graph::inference();
    let b = bind_all(&mut g, &pair);
    let r = cfg.roi_size;
    let zero = g.constant(Tensor::zeros(&[cfg.fpn_dim, r, r]));
    let v = head_embed(&mut g, &b, Side::Online, &cfg, &[zero], true).unwrap();
    assert_eq!(g.shape(v), [1, cfg.embed_dim]);
    assert!(g.data(v).iter().all(|&x| x == 0.0));

    let data: Vec<f64> = (0..cfg.fpn_dim * r * r).map(|i| (i as f64).sin()).collect();
    let feat = g.constant(Tensor::new(vec![cfg.fpn_dim, r, r], data).unwrap());
    let on = head_embed(&mut g, &b, Side::Online, &cfg, &[feat, feat, zero], false).unwrap();
    let tg = head_embed(&mut g, &b, Side::Target, &cfg, &[feat, feat, zero], false).unwrap();
    assert_eq!(g.shape(on), [3, cfg.embed_dim]);
    assert_eq!(g.data(on), g.data(tg));
    assert!(head_embed(&mut g, &b, Side::Target, &cfg, &[feat], true).is_err());
}

#[test]
fn ema_examples_and_decay_law() {
    let mut pair = ModelPair::new(ModelConfig::tiny(), 2).unwrap();
    let before = pair.params.clone();
    pair.ema_update(0.99).unwrap();
    assert_eq!(pair.params, before, "theta = xi is a fixed point");

    let names: Vec<String> = pair.params.names_with_prefix("target.").cloned().collect();
    for n in &names {
        pair.params.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let on = format!("online.{}", &n[7..]);
        pair.params.get_mut(&on).unwrap().data_mut().iter_mut().for_each(|v| *v = 1.0);
    }
    pair.ema_update(0.99).unwrap();
    for n in &names {
        assert!(pair.params.get(n).unwrap().data().iter().all(|&v| (v - 0.01).abs() < 1e-15));
    }

    let mut pair = ModelPair::new(ModelConfig::tiny(), 9).unwrap();
    let m = 0.9;
    for n in &names {
        pair.params.get_mut(n).unwrap().data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.3).sin() * 2.0);
    }
    let xi0 = pair.params.clone();
    let steps = 25;
    for _ in 0..steps {
        pair.ema_update(m).unwrap();
    }
    for n in &names {
        let theta = pair.params.get(&format!("online.{}", &n[7..])).unwrap().data().to_vec();
        let (x0, xn) = (xi0.get(n).unwrap().data(), pair.params.get(n).unwrap().data());
        for i in 0..theta.len() {
            let want = m.powi(steps) * (x0[i] - theta[i]).abs();
            assert!(((xn[i] - theta[i]).abs() - want).abs() <= 1e-12);
        }
    }
    assert!(pair.ema_update(1.0).is_err());
}

#[test]
fn target_parameters_never_receive_gradients() {
    let cfg = ModelConfig::tiny();
    let pair = ModelPair::new(cfg.clone(), 4).unwrap();
    let mut g = Graph::new();
    let b = bind_all(&mut g, &pair);
    let img = Image::from_fn(64, 64, 3, |y, x, c| ((x + 2 * y + 5 * c) % 9) as f64 / 8.0);
    let x = image_input(&mut g, &img).unwrap();
    let box_ = BBox::new(8.0, 8.0, 40.0, 48.0).unwrap();
    let mut embs = Vec::new();
    for side in [Side::Online, Side::Target] {
        let fp = extract(&mut g, &b, side, &cfg, x, 4).unwrap();
        let pooled = roi_align_pyramid(&mut g, &fp, &box_, &cfg).unwrap();
        embs.push(head_embed(&mut g, &b, side, &cfg, &[pooled], side == Side::Online).unwrap());
    }
    let prod = g.mul(embs[0], embs[1]).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();
    let trained = b.gradients(&g, &grads);
    assert!(trained.keys().all(|k| k.starts_with("online.")));
    for name in pair.params.names_with_prefix("target.") {
        assert!(grads.get(b.var(name).unwrap()).is_none());
    }
    assert!(trained["online.g.fc1.weight"].iter().any(|&v| v != 0.0));
}

#[test]
fn param_layout_and_store_validation() {
    let pair = ModelPair::new(ModelConfig::tiny(), 0).unwrap();
    assert!(pair.module_names(Side::Target, "rpn").is_empty());
    assert!(pair.module_names(Side::Target, "q").is_empty());
    assert_eq!(pair.module_names(Side::Online, "rpn").len(), 6);
    for m in SHARED_MODULES {
        let on = pair.module_names(Side::Online, m);
        let tg = pair.module_names(Side::Target, m);
        assert_eq!(on.len(), tg.len());
        for (a, b) in on.iter().zip(&tg) {
            assert_eq!(pair.params.get(a).unwrap(), pair.params.get(b).unwrap());
        }
    }
    let again = ModelPair::from_store(ModelConfig::tiny(), pair.params.clone()).unwrap();
    assert_eq!(again, pair);
    assert!(ModelPair::from_store(ModelConfig::default(), pair.params.clone()).is_err());
    assert_eq!(ModelPair::new(ModelConfig::tiny(), 0).unwrap(), pair);
}
