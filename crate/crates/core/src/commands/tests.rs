use super::*;
use crate::training::ModelPreset;

fn write_images(dir: &Path, images: &[Image]) {
    fs::create_dir_all(dir).unwrap();
    for (i, img) in images.iter().enumerate() {
        img.write_ppm(&dir.join(format!("{i:04}.ppm"))).unwrap();
    }
}

#[test]
fn propose_uniform_and_half_half() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("uniform");
    write_images(&corpus, &[Image::from_fn(32, 32, 3, |_, _, _| 0.5), Image::from_fn(32, 32, 3, |_, _, c| 0.2 * c as f64)]);
    let s = cmd_propose(&corpus, &dir.path().join("c1"), &SegmentationParams::default()).unwrap();
    assert_eq!((s.images, s.proposals, s.mean()), (2, 0, 0.0));
    assert_eq!(fs::read_to_string(dir.path().join("c1/0000.props")).unwrap(), "");

    let half = Image::from_fn(32, 32, 3, |_, x, _| if x < 16 { 0.0 } else { 1.0 });
    let corpus = dir.path().join("half");
    write_images(&corpus, &[half.clone(), half]);
    let params = SegmentationParams { sigma: 0.0, ..Default::default() };
    let s = cmd_propose(&corpus, &dir.path().join("c2"), &params).unwrap();
    assert_eq!(s.mean(), 2.0);
    cmd_propose(&corpus, &dir.path().join("c3"), &params).unwrap();
    for f in ["0000.props", "0001.props"] {
        assert_eq!(fs::read(dir.path().join("c2").join(f)).unwrap(), fs::read(dir.path().join("c3").join(f)).unwrap());
    }
}

#[test]
fn propose_skips_unreadable_and_fails_when_all_do() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.ppm"), b"P6\n").unwrap();
    assert!(cmd_propose(dir.path(), &dir.path().join("cache"), &SegmentationParams::default()).is_err());
    Image::from_fn(16, 16, 3, |_, _, _| 0.3).write_ppm(&dir.path().join("good.ppm")).unwrap();
    let s = cmd_propose(dir.path(), &dir.path().join("cache"), &SegmentationParams::default()).unwrap();
    assert_eq!((s.images, s.failed), (1, 1));
}

#[test]
fn synth_is_deterministic_and_annotated() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s = cmd_synth(1, a.path(), 5).unwrap();
    cmd_synth(1, b.path(), 5).unwrap();
    assert_eq!(s.images, 1);
    assert_eq!(fs::read(a.path().join("0000.ppm")).unwrap(), fs::read(b.path().join("0000.ppm")).unwrap());
    let boxes = read_boxes(&a.path().join("0000.gt")).unwrap();
    assert_eq!(boxes.len(), s.objects);
    assert!(boxes.iter().all(|b| b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 224.0 && b.y2 <= 224.0));
}

#[test]
fn perfect_detections_give_a_zero_report() {
    let images: Vec<PathBuf> = vec!["a.ppm".into(), "b.ppm".into()];
    let gts = vec![vec![BBox::new(0.0, 0.0, 10.0, 10.0).unwrap()], vec![BBox::new(5.0, 5.0, 30.0, 20.0).unwrap(), BBox::new(40.0, 40.0, 60.0, 60.0).unwrap()]];
    let dets: Vec<Vec<BBox>> = gts.iter().map(|g| g.iter().map(|b| b.with_score(0.9)).collect()).collect();
    let r = evaluate_detections(&images, dets, gts, &EvalOptions::default()).unwrap();
    assert_eq!((r.recall, r.map, r.objects), (1.0, 1.0, 3));
    assert!(r.errors.columns().iter().all(|(_, v)| *v == 0.0));
    let table = r.errors.to_table();
    for col in ["Cls", "Loc", "Dupe", "Bkg", "Miss", "FalsePos", "FalseNeg"] {
        assert!(table.contains(col), "{col}");
    }
    assert!(r.detections_text().starts_with("a 0 0 10 10"));
    assert!(r.to_key_values().contains("map50=1"));
}

#[test]
fn evaluate_needs_annotations_and_reads_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    cmd_synth(2, dir.path(), 3).unwrap();
    let ckpt = dir.path().join("tiny.ckpt");
    ModelPair::new(ModelPreset::Tiny.config(), 0).unwrap().params.save(&ckpt).unwrap();
    let r = cmd_evaluate(&ckpt, dir.path(), &EvalOptions::default()).unwrap();
    assert_eq!(r.images, 2);
    assert!(r.detections.iter().all(|(_, d)| d.len() <= 4));
    assert!((0.0..=1.0).contains(&r.recall));
    fs::remove_file(dir.path().join("0001.gt")).unwrap();
    assert!(matches!(cmd_evaluate(&ckpt, dir.path(), &EvalOptions::default()), Err(Error::MissingFile(_))));
    assert!(matches!(load_model(&dir.path().join("none.ckpt")), Err(Error::MissingFile(_))));
}

#[test]
fn pretrain_and_ablation_driver() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    cmd_synth(2, &corpus, 1).unwrap();
    let cache = dir.path().join("cache");
    cmd_propose(&corpus, &cache, &SegmentationParams::default()).unwrap();
    let base = TrainConfig {
        model: ModelPreset::Tiny,
        steps: 2,
        batch_size: 1,
        base_lr: 0.005,
        corpus,
        proposal_cache: cache,
        checkpoint: dir.path().join("out/m.ckpt"),
        ..Default::default()
    };
    let missing = dir.path().join("base.ckpt");
    let sep = TrainConfig { strategy: Strategy::Separate, base_checkpoint: Some(missing.clone()), ..base.clone() };
    let err = cmd_pretrain(&sep).unwrap_err();
    assert!(err.to_string().contains(&missing.display().to_string()), "{err}");

    let runs = cmd_ablation(&base).unwrap();
    assert_eq!(runs.len(), 4);
    for (name, report) in &runs {
        assert!(report.checkpoint.exists(), "{name}");
        assert!(report.log.iter().all(|l| l.loss_rpn.is_finite() && l.loss_det.is_finite()));
        assert!(fs::read_to_string(format!("{}.log", report.checkpoint.display())).unwrap().lines().count() == 4);
    }
    assert!(runs[0].1.checkpoint.ends_with("m.ckpt.det_only.ss"));

    // the joint det_only model is the base of a separate run
    let sep = TrainConfig { base_checkpoint: Some(runs[0].1.checkpoint.clone()), ..sep };
    let r = cmd_pretrain(&sep).unwrap();
    let before = ParamStore::load(&runs[0].1.checkpoint).unwrap();
    let after = ParamStore::load(&r.checkpoint).unwrap();
    for (name, t) in before.iter() {
        if !name.starts_with("online.rpn.") {
            assert_eq!(after.get(name).unwrap().data(), t.data(), "{name}");
        }
    }
}

#[test]
fn gradcheck_command_reports() {
    let r = cmd_gradcheck(3, Some(OpKind::MaxPool2d)).unwrap();
    assert!(!r.passed());
    assert!(r.to_string().contains("max_pool2d"));
}
