use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::detector::ModelPair;
use crate::geometry::{AnchorSet, LevelAnchors};
use crate::image::Image;
use crate::numerics::{gradient_check, CheckOptions, Probe};
use crate::views::{make_views, ViewConfig};

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn custom_anchors(boxes: Vec<BBox>) -> AnchorSet {
    let n = boxes.len();
    AnchorSet { levels: vec![LevelAnchors { stride: 4, size: 24.0, grid_h: 1, grid_w: n, boxes }] }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn threshold_labels() {
    let gt = [bx(0.0, 0.0, 10.0, 10.0)];
    let anchors = custom_anchors(vec![
        bx(0.0, 0.0, 10.0, 10.0),  // IoU 1, argmax
        bx(0.0, 0.0, 10.0, 12.5),  // IoU 0.8
        bx(0.0, 0.0, 10.0, 20.0),  // IoU 0.5
        bx(0.0, 0.0, 10.0, 50.0),  // IoU 0.2
    ]);
    let m = match_anchors(&anchors, &gt, &MatchConfig::default(), &mut rng()).unwrap();
    use AnchorLabel::*;
    assert_eq!(m.labels, vec![Positive, Positive, Ignore, Negative]);
    assert_eq!(m.targets[0], Some([0.0, 0.0, 0.0, 0.0]));
    assert!(m.targets[2].is_none());
    assert_eq!(m.sampled, vec![0, 1, 3]);
}

#[test]
fn argmax_rescues_weakly_covered_boxes() {
    let gt = [bx(0.0, 0.0, 10.0, 10.0), bx(100.0, 100.0, 110.0, 110.0)];
    let anchors = custom_anchors(vec![bx(0.0, 0.0, 10.0, 20.0), bx(0.0, 0.0, 10.0, 50.0), bx(100.0, 100.0, 110.0, 140.0)]);
    let m = match_anchors(&anchors, &gt, &MatchConfig::default(), &mut rng()).unwrap();
    use AnchorLabel::*;
    assert_eq!(m.labels, vec![Positive, Negative, Positive]);
    assert!(match_anchors(&anchors, &[], &MatchConfig::default(), &mut rng()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn every_box_gets_a_positive(seed in any::<u64>(), n in 1usize..6) {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let anchors = AnchorSet::generate(&Default::default(), 64, 64, 4).unwrap();
        let gt: Vec<BBox> = (0..n).map(|_| {
            let (x, y) = (r.gen_range(0.0..50.0), r.gen_range(0.0..50.0));
            bx(x, y, x + r.gen_range(4.0..14.0), y + r.gen_range(4.0..14.0))
        }).collect();
        let cfg = MatchConfig { batch_size: 32, max_positives: 8, ..Default::default() };
        let m = match_anchors(&anchors, &gt, &cfg, &mut r).unwrap();
        let all: Vec<&BBox> = anchors.iter().collect();
        for g in &gt {
            prop_assert!((0..all.len()).any(|i| m.labels[i] == AnchorLabel::Positive && iou(all[i], g) > 0.0));
        }
        prop_assert!(m.sampled.len() <= 32);
        prop_assert!(m.sampled_positives().count() <= 8);
        prop_assert!(m.sampled.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(m.sampled.iter().all(|&i| m.labels[i] != AnchorLabel::Ignore));
        prop_assert_eq!(m.num_positions, all.len() / 3);
    }
}

#[test]
fn smooth_l1_values() {
    assert_eq!(smooth_l1(0.0), 0.0);
    assert_eq!(smooth_l1(0.5), 0.125);
    assert_eq!(smooth_l1(2.0), 1.5);
    assert_eq!(smooth_l1(-2.0), 1.5);
}

fn fixture_match() -> AnchorMatch {
    use AnchorLabel::*;
    AnchorMatch {
        labels: vec![Positive, Negative, Ignore, Positive, Negative],
        targets: vec![Some([0.1, -0.2, 0.3, 0.05]), None, None, Some([-0.4, 0.0, 0.2, -0.1]), None],
        sampled: vec![0, 1, 3, 4],
        num_positions: 2,
    }
}

fn eval_rpn(logits: &[f64], deltas: &[f64], m: &AnchorMatch) -> (f64, f64, f64) {
    let mut g = Graph::new();
    let l = g.param(Tensor::vector(logits.to_vec()));
    let d = g.param(Tensor::vector(deltas.to_vec()));
    let r = rpn_loss(&mut g, l, d, m, 1.0).unwrap();
    (g.item(r.total), g.item(r.classification), g.item(r.regression))
}

#[test]
fn rpn_loss_examples() {
    let m = fixture_match();
    let logits = [40.0, -40.0, 0.0, 40.0, -40.0];
    let mut deltas = vec![0.0; 20];
    for &i in &[0usize, 3] {
        deltas[4 * i..4 * i + 4].copy_from_slice(&m.targets[i].unwrap());
    }
    let (total, _, reg) = eval_rpn(&logits, &deltas, &m);
    assert_eq!(reg, 0.0);
    assert!((0.0..=1e-6).contains(&total), "{total}");

    let single = AnchorMatch { labels: vec![AnchorLabel::Negative], targets: vec![None], sampled: vec![0], num_positions: 1 };
    let (total, cls, reg) = eval_rpn(&[0.0], &[0.3, 0.1, 0.0, 2.0], &single);
    assert_eq!(reg, 0.0);
    assert!((total - std::f64::consts::LN_2).abs() < 1e-15 && total == cls);
}

#[test]
fn rpn_regression_is_gated() {
    let m = fixture_match();
    let logits = [0.3, -1.0, 2.0, 0.7, 0.1];
    let deltas: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin()).collect();
    let base = eval_rpn(&logits, &deltas, &m).0;
    for i in [1usize, 2, 4] {
        let mut d = deltas.clone();
        d[4 * i..4 * i + 4].iter_mut().for_each(|v| *v += 3.7);
        assert_eq!(eval_rpn(&logits, &d, &m).0.to_bits(), base.to_bits());
    }
    let mut d = deltas.clone();
    d[0] += 0.5;
    assert_ne!(eval_rpn(&logits, &d, &m).0, base);
    assert!(base >= 0.0);
}

fn rpn_probe(x: &[f64], want: bool) -> crate::Result<Probe> {
    let m = fixture_match();
    let mut g = Graph::new();
    let v = g.param(Tensor::vector(x.to_vec()));
    let l = g.gather(v, &(0..5).collect::<Vec<_>>())?;
    let d = g.gather(v, &(5..25).collect::<Vec<_>>())?;
    let r = rpn_loss(&mut g, l, d, &m, 1.0)?;
    let value = g.item(r.total);
    let signature = g.kink_signature();
    let grad = if want { Some(g.backward(r.total)?.get_or_zeros(v, x.len())) } else { None };
    Ok(Probe { value, signature, grad })
}

#[test]
fn rpn_loss_gradient() {
    let x: Vec<f64> = (0..25).map(|i| (i as f64 * 1.37).sin() * 1.8).collect();
    let r = gradient_check(rpn_probe, &x, &CheckOptions::default()).unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.checked > 15);
}

fn sim_value(v: &[f64], t1: &[f64], t2: &[f64], k: usize) -> f64 {
    let e = v.len() / k;
    let mut g = Graph::new();
    let a = g.param(Tensor::new(vec![k, e], v.to_vec()).unwrap());
    let b = g.constant(Tensor::new(vec![k, e], t1.to_vec()).unwrap());
    let c = g.constant(Tensor::new(vec![k, e], t2.to_vec()).unwrap());
    let l = sim_loss(&mut g, a, b, c).unwrap();
    g.item(l)
}

#[test]
fn sim_loss_examples() {
    let v = [2.0, 0.0, 0.0, 0.0, -3.0, 0.0];
    assert_eq!(sim_value(&v, &[5.0, 0.0, 0.0, 0.0, -1.0, 0.0], &[0.5, 0.0, 0.0, 0.0, -0.5, 0.0], 2), -4.0);
    assert_eq!(sim_value(&v, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 7.0, 0.0, 0.0, 2.0], 2), 0.0);
    assert_eq!(sim_value(&v, &[-1.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[-3.0, 0.0, 0.0, 0.0, 9.0, 0.0], 2), 4.0);
    let mut g = Graph::new();
    let empty = g.constant(Tensor::zeros(&[0, 3]));
    let l = sim_loss(&mut g, empty, empty, empty).unwrap();
    assert_eq!(g.item(l), 0.0);
}

proptest! {
    #[test]
    fn sim_loss_bounds_and_scale_invariance(
        v in proptest::collection::vec(-3.0f64..3.0, 8),
        t in proptest::collection::vec(-3.0f64..3.0, 16),
        s in 0.1f64..10.0,
    ) {
        prop_assume!(v.chunks(4).chain(t.chunks(4)).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let (t1, t2) = t.split_at(8);
        let l = sim_value(&v, t1, t2, 2);
        prop_assert!((-4.0 - 1e-12..=4.0 + 1e-12).contains(&l));
        let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
        prop_assert!((sim_value(&scaled, t1, t2, 2) - l).abs() < 1e-12);
    }
}

#[test]
fn sim_gradient_is_orthogonal_to_online_vector() {
    let v = vec![0.3, -1.2, 0.8, 2.0, 0.1, 0.4];
    let t1 = vec![1.0, 0.5, -0.3, -0.2, 0.9, 1.1];
    let t2 = vec![-0.7, 0.2, 0.6, 0.3, 0.3, -2.0];
    let mut g = Graph::new();
    let a = g.param(Tensor::new(vec![2, 3], v.clone()).unwrap());
    let b = g.param(Tensor::new(vec![2, 3], t1).unwrap());
    let c = g.param(Tensor::new(vec![2, 3], t2).unwrap());
    let l = sim_loss(&mut g, a, b, c).unwrap();
    let grads = g.backward(l).unwrap();
    let ga = grads.get(a).unwrap();
    for r in 0..2 {
        let dot: f64 = (0..3).map(|i| ga[3 * r + i] * v[3 * r + i]).sum();
        assert!(dot.abs() < 1e-12, "{dot}");
    }
    assert!(grads.get(b).is_none() && grads.get(c).is_none(), "targets are gradient-stopped");
}

fn sim_probe(x: &[f64], want: bool) -> crate::Result<Probe> {
    let mut g = Graph::new();
    let a = g.param(Tensor::new(vec![3, 4], x.to_vec())?);
    let t1 = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64).cos()).collect())?);
    let t2 = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.4).sin() - 0.2).collect())?);
    let l = sim_loss(&mut g, a, t1, t2)?;
    let value = g.item(l);
    let signature = g.kink_signature();
    let grad = if want { Some(g.backward(l)?.get_or_zeros(a, x.len())) } else { None };
    Ok(Probe { value, signature, grad })
}

#[test]
fn sim_loss_gradient() {
    let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.9).sin() + 0.1).collect();
    let r = gradient_check(sim_probe, &x, &CheckOptions::default()).unwrap();
    assert!(r.passed, "{r:?}");
}

fn tiny_views(seed: u64) -> ViewTriple {
    let img = Image::from_fn(96, 96, 3, |y, x, c| (((x / 8 + y / 8 + c) % 3) as f64 * 0.4 + (x as f64 * 0.05).sin() * 0.1).clamp(0.0, 1.0));
    let props = [bx(8.0, 8.0, 40.0, 40.0), bx(20.0, 10.0, 80.0, 70.0), bx(0.0, 50.0, 45.0, 96.0)];
    let cfg = ViewConfig { size: 96, ..Default::default() };
    make_views(&img, &props, seed, &cfg).unwrap()
}

#[test]
fn det_loss_is_bounded_and_sums_parts() {
    let cfg = ModelConfig::tiny();
    for seed in 0..4 {
        let pair = ModelPair::new(cfg.clone(), seed).unwrap();
        let views = tiny_views(seed);
        let mut g = Graph::new();
        let mut b = Binding::new();
        b.bind_side(&mut g, &pair.params, Side::Online, true);
        b.bind_side(&mut g, &pair.params, Side::Target, false);
        let vp = view_pyramids(&mut g, &b, &cfg, &views).unwrap();
        assert_eq!(vp.online[2].num_levels(), 3);
        let d = det_loss(&mut g, &b, &cfg, &vp, &views.boxes).unwrap();
        let (t, s, sb) = (g.item(d.total), g.item(d.sim), g.item(d.sim_bar));
        assert_eq!(d.k_effective, views.valid_count());
        assert!((-8.0..=8.0).contains(&t));
        assert_eq!(t, s + sb);
        let rpn = g.constant(Tensor::scalar(0.7));
        let total = total_loss(&mut g, rpn, d.total).unwrap();
        assert_eq!(g.item(total), (0.7 + t));
    }
}

#[test]
fn det_loss_terms_agree_on_constant_features() {
    // every box pools the same constant, so each cosine term compares q(p(g(c))) with p(g(c))
    let cfg = ModelConfig::tiny();
    let pair = ModelPair::new(cfg.clone(), 1).unwrap();
    let mut g = Graph::new();
    let mut b = Binding::new();
    b.bind_side(&mut g, &pair.params, Side::Online, true);
    b.bind_side(&mut g, &pair.params, Side::Target, false);
    let pyramid = |g: &mut Graph, size: usize, levels: usize| FeaturePyramid {
        levels: (0..levels).map(|l| g.constant(Tensor::full(&[cfg.fpn_dim, size >> (l + 2), size >> (l + 2)], 0.6))).collect(),
        strides: (0..levels).map(|l| 1 << (l + 2)).collect(),
        height: size,
        width: size,
    };
    let vp = ViewPyramids {
        online: vec![pyramid(&mut g, 64, 4), pyramid(&mut g, 64, 4), pyramid(&mut g, 32, 3)],
        target: vec![pyramid(&mut g, 64, 4), pyramid(&mut g, 64, 4), pyramid(&mut g, 32, 3)],
    };
    let vb = ViewBoxes { v1: bx(4.0, 4.0, 40.0, 40.0), v2: Some(bx(0.0, 0.0, 50.0, 30.0)), v3: Some(bx(0.0, 0.0, 25.0, 15.0)) };
    let d = det_loss(&mut g, &b, &cfg, &vp, &[vb, ViewBoxes { v2: None, v3: None, ..vb }]).unwrap();
    assert_eq!(d.k_effective, 1);
    let sim = g.item(d.sim);
    let sim_bar = g.item(d.sim_bar);
    assert!((sim - sim_bar).abs() < 1e-12);
    assert!((-4.0..=4.0).contains(&sim));
}

fn det_probe(names: &[String], x: &[f64], want: bool) -> crate::Result<Probe> {
    let cfg = ModelConfig::tiny();
    let mut pair = ModelPair::new(cfg.clone(), 11)?;
    let mut off = 0;
    for n in names {
        let t = pair.params.get_mut(n)?;
        let len = t.numel();
        t.data_mut().copy_from_slice(&x[off..off + len]);
        off += len;
    }
    let views = tiny_views(3);
    let mut g = Graph::new();
    let mut b = Binding::new();
    b.bind_side(&mut g, &pair.params, Side::Online, true);
    b.bind_side(&mut g, &pair.params, Side::Target, false);
    let vp = view_pyramids(&mut g, &b, &cfg, &views)?;
    let d = det_loss(&mut g, &b, &cfg, &vp, &views.boxes)?;
    let value = g.item(d.total);
    let signature = g.kink_signature();
    let grad = if want {
        let grads = g.backward(d.total)?;
        let all = b.gradients(&g, &grads);
        Some(names.iter().flat_map(|n| all[n].clone()).collect())
    } else {
        None
    };
    Ok(Probe { value, signature, grad })
}

#[test]
fn det_loss_gradient() {
    let names: Vec<String> = ["online.q.fc2.weight", "online.p.fc1.weight", "online.g.fc1.bias", "online.f.lateral3.weight", "online.f.stage2.conv1.weight"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let pair = ModelPair::new(ModelConfig::tiny(), 11).unwrap();
    let x: Vec<f64> = names.iter().flat_map(|n| pair.params.get(n).unwrap().data().to_vec()).collect();
    let r = gradient_check(|x, w| det_probe(&names, x, w), &x, &CheckOptions::default()).unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.checked > x.len() / 2, "{r:?}");
}
