use super::*;
use crate::corpus::write_boxes;
use crate::synth::{synth_image, SynthConfig};

#[test]
fn cosine_schedule() {
    assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
    assert!(cosine_lr(100, 100, 0.1).abs() < 1e-18);
    assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
}

fn one_param(v: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", crate::numerics::Tensor::vector(vec![v, v]));
    s
}

#[test]
fn sgd_examples() {
    let mut p = one_param(1.0);
    let mut vel = BTreeMap::new();
    let zero: BTreeMap<String, Vec<f64>> = [("w".to_string(), vec![0.0, 0.0])].into();
    sgd_step(&mut p, &zero, &mut vel, 0.1, 0.9, 0.0).unwrap();
    assert_eq!(p.get("w").unwrap().data(), &[1.0, 1.0]);
    let one: BTreeMap<String, Vec<f64>> = [("w".to_string(), vec![1.0, 1.0])].into();
    sgd_step(&mut p, &one, &mut vel, 0.1, 0.9, 0.0).unwrap();
    assert_eq!(p.get("w").unwrap().data(), &[0.9, 0.9]);
    // velocity carries: v = 0.9 + 1
    sgd_step(&mut p, &one, &mut vel, 0.1, 0.9, 0.0).unwrap();
    assert!((p.get("w").unwrap().data()[0] - (0.9 - 0.19)).abs() < 1e-15);
    let bad: BTreeMap<String, Vec<f64>> = [("w".to_string(), vec![1.0])].into();
    assert!(sgd_step(&mut p, &bad, &mut vel, 0.1, 0.9, 0.0).is_err());
}

#[test]
fn config_text_roundtrip_and_unknown_keys() {
    let mut cfg = TrainConfig::default();
    cfg.set("strategy", "separate").unwrap();
    cfg.set("base_checkpoint", "/tmp/base.ckpt").unwrap();
    cfg.set("rpn_nms_threshold", "0.65").unwrap();
    cfg.set("model", "tiny").unwrap();
    assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);

    let text = "# comment\nsteps = 3\nfoo = 1\nbatch_size = 2 # trailing\nbar = x\n";
    match TrainConfig::parse(text) {
        Err(Error::UnknownKeys(k)) => assert_eq!(k, ["foo", "bar"]),
        other => panic!("unexpected {other:?}"),
    }
    assert!(TrainConfig::parse("strategy = both").is_err());
    assert!(TrainConfig::parse("momentum = 1.0").is_err());
    assert!(TrainConfig::parse("view_size = 100").is_err());
    let c = TrainConfig::parse("steps = 3\ncheckpoint = out/m.ckpt").unwrap();
    assert_eq!(c.log_path(), Path::new("out/m.ckpt.log"));
    assert_eq!(c.snapshot_path(20), Path::new("out/m.ckpt.step000020"));
}

fn tiny_set(n: usize) -> TrainingSet {
    let synth = SynthConfig { size: 96, object_scale: (32.0, 60.0), max_objects: 3, ..Default::default() };
    let (mut images, mut proposals) = (Vec::new(), Vec::new());
    for seed in 0..n as u64 {
        let s = synth_image(seed, &synth);
        images.push(s.image);
        proposals.push(s.boxes.iter().map(|b| BBox { class_id: None, ..*b }).collect());
    }
    TrainingSet { images, proposals, skipped: 0 }
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig { model: ModelPreset::Tiny, view_size: 96, batch_size: 2, steps: 2, base_lr: 0.01, ..Default::default() }
}

#[test]
fn separate_training_only_moves_rpn() {
    let data = tiny_set(2);
    let cfg = TrainConfig { strategy: Strategy::Separate, ..tiny_cfg() };
    let mut pair = ModelPair::new(cfg.model.config(), 3).unwrap();
    let before = pair.params.clone();
    train(&mut pair, &cfg, &data, |_, _| Ok(())).unwrap();
    let mut moved = 0;
    for (name, t) in before.iter() {
        let after = pair.params.get(name).unwrap();
        if name.starts_with("online.rpn.") {
            moved += usize::from(after.data() != t.data());
        } else {
            assert_eq!(after.data(), t.data(), "{name} changed");
        }
    }
    assert!(moved > 0);
}

#[test]
fn det_only_extractor_gradients_ignore_rpn_loss() {
    let data = tiny_set(1);
    let pair = ModelPair::new(ModelPreset::Tiny.config(), 5).unwrap();
    let base = TrainConfig { backbone_loss: BackboneLoss::DetOnly, ..tiny_cfg() };
    let a = image_step(&pair, &base, &data.images[0], &data.proposals[0], 9).unwrap();
    let b = image_step(&pair, &TrainConfig { rpn_lambda: 0.0, ..base.clone() }, &data.images[0], &data.proposals[0], 9).unwrap();
    let plus = image_step(&pair, &TrainConfig { backbone_loss: BackboneLoss::DetPlusRpn, ..base }, &data.images[0], &data.proposals[0], 9).unwrap();
    let mut differs = false;
    for (name, g) in &a.grads {
        if name.starts_with("online.f.") {
            assert_eq!(g, &b.grads[name], "{name}");
            differs |= g != &plus.grads[name];
        }
    }
    assert!(differs, "det_plus_rpn should feed the RPN loss into the extractor");
    assert!(!a.grads.keys().any(|k| k.starts_with("target.")));
}

#[test]
fn every_ablation_is_finite() {
    let data = tiny_set(2);
    for strategy in [Strategy::Joint, Strategy::Separate] {
        for backbone_loss in [BackboneLoss::DetOnly, BackboneLoss::DetPlusRpn] {
            for detector_proposals in [ProposalSource::Ss, ProposalSource::SsPlusRpn] {
                let cfg = TrainConfig { strategy, backbone_loss, detector_proposals, ..tiny_cfg() };
                let mut pair = ModelPair::new(cfg.model.config(), 1).unwrap();
                let log = train(&mut pair, &cfg, &data, |_, _| Ok(())).unwrap();
                assert_eq!(log.len(), 2);
                assert!(log.iter().all(|l| l.loss_rpn.is_finite() && l.loss_det.is_finite()));
                assert!(pair.params.iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
            }
        }
    }
}

fn write_tiny_corpus(dir: &Path, n: usize) {
    let data = tiny_set(n);
    for (i, (img, props)) in data.images.iter().zip(&data.proposals).enumerate() {
        img.write_ppm(&dir.join(format!("corpus/{i:04}.ppm"))).unwrap();
        write_boxes(&dir.join(format!("cache/{i:04}.props")), props).unwrap();
    }
    // one image without proposals
    data.images[0].write_ppm(&dir.join("corpus/9999.ppm")).unwrap();
}

#[test]
fn runs_are_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("corpus")).unwrap();
    write_tiny_corpus(dir.path(), 3);
    let cfg_for = |name: &str| TrainConfig {
        corpus: dir.path().join("corpus"),
        proposal_cache: dir.path().join("cache"),
        checkpoint: dir.path().join(name),
        snapshot_every: 1,
        ..tiny_cfg()
    };
    let a = run(&cfg_for("a.ckpt")).unwrap();
    let b = run(&cfg_for("b.ckpt")).unwrap();
    assert_eq!(a.skipped_images, 1);
    assert_eq!(a.snapshots.len(), 3);
    assert_eq!(fs::read(&a.checkpoint).unwrap(), fs::read(&b.checkpoint).unwrap());
    let log_a = fs::read_to_string(cfg_for("a.ckpt").log_path()).unwrap();
    assert_eq!(log_a, fs::read_to_string(cfg_for("b.ckpt").log_path()).unwrap());
    assert!(log_a.starts_with("# 3 images, 1 skipped\n# step loss_rpn loss_det lr\n1 "));
    assert_ne!(fs::read(&a.snapshots[0]).unwrap(), fs::read(&a.checkpoint).unwrap());
}

#[test]
fn separate_needs_a_base_checkpoint() {
    let cfg = TrainConfig { strategy: Strategy::Separate, ..tiny_cfg() };
    assert!(matches!(initial_model(&cfg), Err(Error::Config(_))));
    let cfg = TrainConfig { base_checkpoint: Some("/nonexistent/base.ckpt".into()), ..cfg };
    assert!(matches!(initial_model(&cfg), Err(Error::MissingFile(_))));
    assert!(train_joint(&cfg).is_err());
    assert!(train_separate(&tiny_cfg()).is_err());
}

#[test]
fn empty_cache_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    tiny_set(1).images[0].write_ppm(&dir.path().join("0000.ppm")).unwrap();
    assert!(matches!(TrainingSet::load(dir.path(), &dir.path().join("cache")), Err(Error::EmptyProposalCache(_))));
}
