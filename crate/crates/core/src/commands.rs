//! The command layer behind the `detpretrain` binary: each subcommand is a plain
//! function returning a summary, so examples and tests can drive it directly.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use crate::corpus::{annotation_path, list_images, proposal_path, read_boxes, write_boxes};
use crate::detector::{propose_image, ModelPair, ProposeOptions};
use crate::error::{Error, Result};
use crate::evaluation::{ap_details, corpus_recall, format_detections, pr_curve_svg, stratify_errors, ErrorReport, StratifyConfig};
use crate::geometry::BBox;
use crate::gradsuite::{gradient_suite, SuiteReport};
use crate::image::Image;
use crate::numerics::{OpKind, ParamStore};
use crate::segmentation::{propose, SegmentationParams};
use crate::synth::{write_corpus, SynthConfig};
use crate::training::{run, BackboneLoss, ModelPreset, ProposalSource, Strategy, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq)]
pub struct ProposeSummary {
    pub images: usize,
    pub failed: usize,
    pub proposals: usize,
}

impl ProposeSummary {
    pub fn mean(&self) -> f64 {
        if self.images == 0 {
            0.0
        } else {
            self.proposals as f64 / self.images as f64
        }
    }
}

impl fmt::Display for ProposeSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} images, {} unreadable, mean {:.2} proposals/image", self.images, self.failed, self.mean())
    }
}

/// Writes one `.props` file per readable image of `corpus` into `cache`.
pub fn cmd_propose(corpus: &Path, cache: &Path, params: &SegmentationParams) -> Result<ProposeSummary> {
    params.validate()?;
    let images = list_images(corpus)?;
    let results: Vec<Option<Vec<BBox>>> = images
        .par_iter()
        .map(|path| match Image::read_ppm(path).and_then(|img| propose(&img, params)) {
            Ok(p) => Some(p),
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                None
            }
        })
        .collect();
    let mut summary = ProposeSummary { images: 0, failed: 0, proposals: 0 };
    for (path, props) in images.iter().zip(results) {
        match props {
            Some(p) => {
                write_boxes(&proposal_path(cache, path), &p)?;
                summary.images += 1;
                summary.proposals += p.len();
            }
            None => summary.failed += 1,
        }
    }
    if summary.images == 0 && summary.failed > 0 {
        return Err(Error::Config(format!("none of the {} images in {} could be read", summary.failed, corpus.display())));
    }
    Ok(summary)
}

/// Runs the configured pre-training strategy.
pub fn cmd_pretrain(cfg: &TrainConfig) -> Result<TrainReport> {
    run(cfg)
}

/// Joint-training ablation over loss routing and detector proposal source.
/// Each run writes next to `cfg.checkpoint` with a suffix naming the setting.
pub fn cmd_ablation(cfg: &TrainConfig) -> Result<Vec<(String, TrainReport)>> {
    let mut out = Vec::new();
    for backbone_loss in [BackboneLoss::DetOnly, BackboneLoss::DetPlusRpn] {
        for detector_proposals in [ProposalSource::Ss, ProposalSource::SsPlusRpn] {
            let name = format!("{backbone_loss}.{detector_proposals}");
            let mut run_cfg = TrainConfig { strategy: Strategy::Joint, backbone_loss, detector_proposals, log: None, ..cfg.clone() };
            run_cfg.checkpoint = append_suffix(&cfg.checkpoint, &name);
            out.push((name, run(&run_cfg)?));
        }
    }
    Ok(out)
}

fn append_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Loads a checkpoint, recognising the model preset from its parameters.
pub fn load_model(path: &Path) -> Result<ModelPair> {
    let store = ParamStore::load(path)?;
    let mut last = None;
    for preset in [ModelPreset::Default, ModelPreset::Tiny] {
        match ModelPair::from_store(preset.config(), store.clone()) {
            Ok(pair) => return Ok(pair),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Checkpoint("no model preset".into())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Proposals kept per image.
    pub k: usize,
    pub iou: f64,
    pub stratify: StratifyConfig,
    pub propose: ProposeOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { k: 4, iou: 0.5, stratify: StratifyConfig::default(), propose: ProposeOptions::default() }
    }
}

/// Class-agnostic evaluation of RPN proposals.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub images: usize,
    /// IoU threshold of recall and mAP.
    pub iou: f64,
    pub objects: usize,
    pub recall: f64,
    pub map: f64,
    pub errors: ErrorReport,
    /// Per-image detections, keyed by image stem.
    pub detections: Vec<(String, Vec<BBox>)>,
    pub pr_svg: String,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} images, {} objects", self.images, self.objects)?;
        writeln!(f, "recall@{:.2} {:.4}", self.iou, self.recall)?;
        writeln!(f, "mAP50 {:.4}", self.map)?;
        write!(f, "{}", self.errors)
    }
}

impl EvalReport {
    /// Metrics as `key=value` lines.
    pub fn to_key_values(&self) -> String {
        format!("images={}\nobjects={}\nrecall={}\n{}", self.images, self.objects, self.recall, self.errors.to_key_values())
    }

    pub fn detections_text(&self) -> String {
        format_detections(&self.detections.iter().cloned().collect())
    }
}

fn agnostic(b: &BBox) -> BBox {
    BBox { class_id: None, ..*b }
}

/// Evaluates the top-`k` RPN proposals of `pair` on an annotated corpus.
pub fn evaluate_model(pair: &ModelPair, corpus: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let images = list_images(corpus)?;
    if images.is_empty() {
        return Err(Error::Config(format!("no images in {}", corpus.display())));
    }
    let gts: Vec<Vec<BBox>> =
        images.iter().map(|p| Ok(read_boxes(&annotation_path(p))?.iter().map(agnostic).collect())).collect::<Result<_>>()?;
    let popts = ProposeOptions { k: opts.k, ..opts.propose };
    let dets: Vec<Vec<BBox>> = images
        .par_iter()
        .map(|p| Ok(propose_image(pair, &Image::read_ppm(p)?, &popts)?.iter().map(agnostic).collect()))
        .collect::<Result<_>>()?;
    evaluate_detections(&images, dets, gts, opts)
}

/// Scores given detections against ground truth, both per image.
pub fn evaluate_detections(images: &[PathBuf], dets: Vec<Vec<BBox>>, gts: Vec<Vec<BBox>>, opts: &EvalOptions) -> Result<EvalReport> {
    let strat = StratifyConfig { fg_thresh: opts.iou, ..opts.stratify.clone() };
    let ap = ap_details(&dets, &gts, opts.iou)?;
    let errors = stratify_errors(&dets, &gts, &strat)?;
    let curves: Vec<(String, _)> = ap.per_class.iter().map(|(c, (_, curve))| (format!("class {c}"), curve)).collect();
    let pr_svg = pr_curve_svg(&curves.iter().map(|(n, c)| (n.as_str(), *c)).collect::<Vec<_>>());
    let stems = images.iter().map(|p| p.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string());
    Ok(EvalReport {
        images: images.len(),
        iou: opts.iou,
        objects: gts.iter().map(Vec::len).sum(),
        recall: corpus_recall(&dets, &gts, opts.iou),
        map: ap.map,
        errors,
        detections: stems.zip(dets).collect(),
        pr_svg,
    })
}

/// Loads `checkpoint` and evaluates it on `corpus`.
pub fn cmd_evaluate(checkpoint: &Path, corpus: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_model(&load_model(checkpoint)?, corpus, opts)
}

/// Runs the gradient suite; `fault` is a test fixture.
pub fn cmd_gradcheck(seed: u64, fault: Option<OpKind>) -> Result<SuiteReport> {
    gradient_suite(seed, fault)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub images: usize,
    pub objects: usize,
}

impl fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} images, {} objects", self.images, self.objects)
    }
}

/// Writes a synthetic annotated corpus.
pub fn cmd_synth(n: usize, out_dir: &Path, seed: u64) -> Result<SynthSummary> {
    let images = write_corpus(n, out_dir, seed, &SynthConfig::default())?;
    Ok(SynthSummary { images: images.len(), objects: images.iter().map(|s| s.boxes.len()).sum() })
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
