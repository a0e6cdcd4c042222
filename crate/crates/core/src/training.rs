//! Pre-training loops.
//!
//! *Joint* training updates the whole online network with `L_RPN + L_det`
//! and tracks it with the target network. *Separate* training starts from a
//! trained checkpoint and updates only the RPN layers with `L_RPN`.
//!
//! Per-image work in a batch runs on the rayon pool; gradients are reduced
//! in image order, so results do not depend on the thread count.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{list_images, proposal_path, read_boxes};
use crate::detector::{extract, image_input, rpn_forward, rpn_propose, Binding, ModelConfig, ModelPair, ProposeOptions, Side};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;
use crate::losses::{det_loss, levels_for, match_anchors, rpn_loss, total_loss, view_pyramids, MatchConfig};
use crate::numerics::{Graph, ParamStore};
use crate::views::{make_views, ViewBoxes, ViewConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Separate,
    Joint,
}

/// Which losses reach the backbone in joint training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneLoss {
    DetOnly,
    DetPlusRpn,
}

/// Where the detector-head proposals come from in joint training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalSource {
    Ss,
    SsPlusRpn,
}

macro_rules! keyword_enum {
    ($ty:ty, $($variant:path => $word:literal),+) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($variant),)+
                    _ => Err(Error::Parse(format!("{s:?} is not one of {}", [$($word),+].join(", ")))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $word,)+ })
            }
        }
    };
}

keyword_enum!(Strategy, Strategy::Separate => "separate", Strategy::Joint => "joint");
keyword_enum!(BackboneLoss, BackboneLoss::DetOnly => "det_only", BackboneLoss::DetPlusRpn => "det_plus_rpn");
keyword_enum!(ProposalSource, ProposalSource::Ss => "ss", ProposalSource::SsPlusRpn => "ss_plus_rpn");

/// Named architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelPreset {
    Default,
    Tiny,
}

keyword_enum!(ModelPreset, ModelPreset::Default => "default", ModelPreset::Tiny => "tiny");

impl ModelPreset {
    pub fn config(self) -> ModelConfig {
        match self {
            ModelPreset::Default => ModelConfig::default(),
            ModelPreset::Tiny => ModelConfig::tiny(),
        }
    }
}

/// A pre-training run, read from flat `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub backbone_loss: BackboneLoss,
    pub detector_proposals: ProposalSource,
    pub epochs: usize,
    /// Overrides `epochs` when nonzero.
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// EMA momentum of the target network.
    pub momentum: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Proposals per image entering the detector loss.
    pub k: usize,
    pub seed: u64,
    pub corpus: PathBuf,
    pub proposal_cache: PathBuf,
    pub checkpoint: PathBuf,
    pub base_checkpoint: Option<PathBuf>,
    /// Snapshot period in steps; 0 disables snapshots.
    pub snapshot_every: usize,
    /// Step log; defaults to the checkpoint path with `.log` appended.
    pub log: Option<PathBuf>,
    pub model: ModelPreset,
    pub view_size: usize,
    pub rpn_lambda: f64,
    pub rpn_batch: usize,
    pub rpn_positives: usize,
    pub rpn_pre_nms_top: usize,
    pub rpn_nms_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Joint,
            backbone_loss: BackboneLoss::DetOnly,
            detector_proposals: ProposalSource::Ss,
            epochs: 1,
            steps: 0,
            batch_size: 8,
            base_lr: 0.1,
            momentum: 0.99,
            sgd_momentum: 0.9,
            weight_decay: 0.0,
            k: 4,
            seed: 0,
            corpus: PathBuf::from("corpus"),
            proposal_cache: PathBuf::from("cache"),
            checkpoint: PathBuf::from("model.ckpt"),
            base_checkpoint: None,
            snapshot_every: 0,
            log: None,
            model: ModelPreset::Default,
            view_size: 224,
            rpn_lambda: 1.0,
            rpn_batch: 256,
            rpn_positives: 128,
            rpn_pre_nms_top: 64,
            rpn_nms_threshold: 0.7,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| Error::Parse(format!("{key} = {value:?}: {e}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 25] = [
        "strategy",
        "backbone_loss",
        "detector_proposals",
        "epochs",
        "steps",
        "batch_size",
        "base_lr",
        "momentum",
        "sgd_momentum",
        "weight_decay",
        "k",
        "seed",
        "corpus",
        "proposal_cache",
        "checkpoint",
        "base_checkpoint",
        "snapshot_every",
        "log",
        "model",
        "view_size",
        "rpn_lambda",
        "rpn_batch",
        "rpn_positives",
        "rpn_pre_nms_top",
        "rpn_nms_threshold",
    ];

    /// Parses `key = value` lines; `#` starts a comment. Every unknown key is
    /// reported at once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let unknown: Vec<String> = pairs.iter().filter(|(k, _)| !Self::KEYS.contains(&k.as_str())).map(|(k, _)| k.clone()).collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        let mut cfg = Self::default();
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "strategy" => self.strategy = parse_value(key, v)?,
            "backbone_loss" => self.backbone_loss = parse_value(key, v)?,
            "detector_proposals" => self.detector_proposals = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "steps" => self.steps = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "base_lr" => self.base_lr = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "sgd_momentum" => self.sgd_momentum = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "k" => self.k = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "corpus" => self.corpus = v.into(),
            "proposal_cache" => self.proposal_cache = v.into(),
            "checkpoint" => self.checkpoint = v.into(),
            "base_checkpoint" => self.base_checkpoint = (!v.is_empty()).then(|| v.into()),
            "snapshot_every" => self.snapshot_every = parse_value(key, v)?,
            "log" => self.log = (!v.is_empty()).then(|| v.into()),
            "model" => self.model = parse_value(key, v)?,
            "view_size" => self.view_size = parse_value(key, v)?,
            "rpn_lambda" => self.rpn_lambda = parse_value(key, v)?,
            "rpn_batch" => self.rpn_batch = parse_value(key, v)?,
            "rpn_positives" => self.rpn_positives = parse_value(key, v)?,
            "rpn_pre_nms_top" => self.rpn_pre_nms_top = parse_value(key, v)?,
            "rpn_nms_threshold" => self.rpn_nms_threshold = parse_value(key, v)?,
            _ => return Err(Error::UnknownKeys(vec![key.to_string()])),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.k == 0 || self.rpn_batch == 0 {
            return bad("batch_size, k and rpn_batch must be positive".into());
        }
        if self.epochs == 0 && self.steps == 0 {
            return bad("one of epochs or steps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad("momentum and sgd_momentum must lie in [0, 1)".into());
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.rpn_lambda >= 0.0) {
            return bad("base_lr, weight_decay and rpn_lambda must be nonnegative".into());
        }
        if !self.view_size.is_multiple_of(8) || self.view_size == 0 {
            return bad(format!("view_size {} must be a positive multiple of 8", self.view_size));
        }
        Ok(())
    }

    /// The config as `key = value` text accepted by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values = [
            self.strategy.to_string(),
            self.backbone_loss.to_string(),
            self.detector_proposals.to_string(),
            self.epochs.to_string(),
            self.steps.to_string(),
            self.batch_size.to_string(),
            self.base_lr.to_string(),
            self.momentum.to_string(),
            self.sgd_momentum.to_string(),
            self.weight_decay.to_string(),
            self.k.to_string(),
            self.seed.to_string(),
            self.corpus.display().to_string(),
            self.proposal_cache.display().to_string(),
            self.checkpoint.display().to_string(),
            opt(&self.base_checkpoint),
            self.snapshot_every.to_string(),
            opt(&self.log),
            self.model.to_string(),
            self.view_size.to_string(),
            self.rpn_lambda.to_string(),
            self.rpn_batch.to_string(),
            self.rpn_positives.to_string(),
            self.rpn_pre_nms_top.to_string(),
            self.rpn_nms_threshold.to_string(),
        ];
        Self::KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| append_ext(&self.checkpoint, "log"))
    }

    pub fn snapshot_path(&self, step: usize) -> PathBuf {
        append_ext(&self.checkpoint, &format!("step{step:06}"))
    }

    fn match_config(&self) -> MatchConfig {
        MatchConfig { batch_size: self.rpn_batch, max_positives: self.rpn_positives, ..Default::default() }
    }

    fn view_config(&self) -> ViewConfig {
        ViewConfig { size: self.view_size, ..Default::default() }
    }
}

fn append_ext(p: &Path, ext: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// `base_lr · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Momentum SGD: `v ← μ v + g + λ θ`, `θ ← θ - lr v`, for every named
/// gradient. Velocities start at zero.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    velocity: &mut BTreeMap<String, Vec<f64>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        let t = params.get_mut(name)?;
        if t.numel() != g.len() {
            return Err(Error::ShapeMismatch { op: "sgd_step", lhs: t.shape().to_vec(), rhs: vec![g.len()] });
        }
        let v = velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for ((p, v), &g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// One line of the step log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss_rpn: f64,
    pub loss_det: f64,
    pub lr: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:.9e} {:.9e} {:.9e}", self.step, self.loss_rpn, self.loss_det, self.lr)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    /// Images left out because they have no cached proposals.
    pub skipped_images: usize,
    pub checkpoint: PathBuf,
    pub snapshots: Vec<PathBuf>,
}

/// Images with their cached proposals, in corpus order.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub images: Vec<Image>,
    pub proposals: Vec<Vec<BBox>>,
    pub skipped: usize,
}

impl TrainingSet {
    /// Loads every image of `corpus` that has a non-empty proposal file.
    pub fn load(corpus: &Path, cache: &Path) -> Result<Self> {
        let mut set = TrainingSet { images: Vec::new(), proposals: Vec::new(), skipped: 0 };
        for path in list_images(corpus)? {
            let props = match read_boxes(&proposal_path(cache, &path)) {
                Ok(p) => p,
                Err(Error::MissingFile(_)) => Vec::new(),
                Err(e) => return Err(e),
            };
            if props.is_empty() {
                set.skipped += 1;
                continue;
            }
            set.images.push(Image::read_ppm(&path)?);
            set.proposals.push(props);
        }
        if set.images.is_empty() {
            return Err(Error::EmptyProposalCache(cache.to_path_buf()));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-image losses and gradients of one step.
#[derive(Debug, Clone)]
pub struct ImageStep {
    pub loss_rpn: f64,
    pub loss_det: f64,
    pub grads: BTreeMap<String, Vec<f64>>,
}

/// `k` draws from `0..n`: without replacement when `n >= k`, otherwise with.
pub fn sample_indices(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    if n >= k {
        rand::seq::index::sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// Forward and backward pass for one image.
pub fn image_step(pair: &ModelPair, cfg: &TrainConfig, image: &Image, proposals: &[BBox], seed: u64) -> Result<ImageStep> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = make_views(image, proposals, rng.gen(), &cfg.view_config())?;
    let gt: Vec<BBox> = views.boxes.iter().filter_map(|b| b.v1.clip(cfg.view_size as f64, cfg.view_size as f64, 1.0)).collect();
    let model = &pair.config;
    let mut g = Graph::new();
    let mut b = Binding::new();
    let joint = cfg.strategy == Strategy::Joint;
    if joint {
        b.bind_side(&mut g, &pair.params, Side::Online, true);
        b.bind_side(&mut g, &pair.params, Side::Target, false);
    } else {
        // bound first, so the side-wide constant binding below skips them
        b.bind(&mut g, &pair.params, "online.rpn.", true);
        b.bind_side(&mut g, &pair.params, Side::Online, false);
    }

    let (v1_pyramid, det) = if joint {
        let vp = view_pyramids(&mut g, &b, model, &views)?;
        (vp.online[0].clone(), Some(vp))
    } else {
        let x = image_input(&mut g, &views.v1)?;
        let levels = levels_for(cfg.view_size, model)?;
        (extract(&mut g, &b, Side::Online, model, x, levels)?, None)
    };
    let mut rpn_input = v1_pyramid.clone();
    if !joint || cfg.backbone_loss == BackboneLoss::DetOnly {
        rpn_input.levels = rpn_input.levels.iter().map(|&l| g.stop_gradient(l)).collect();
    }
    let rpn = rpn_forward(&mut g, &b, model, &rpn_input)?;
    let matched = match_anchors(&rpn.anchors, &gt, &cfg.match_config(), &mut rng)?;
    let l_rpn = rpn_loss(&mut g, rpn.logits, rpn.deltas, &matched, cfg.rpn_lambda)?;

    let (loss, loss_det) = match det {
        Some(vp) => {
            let mut pool: Vec<ViewBoxes> = views.boxes.clone();
            if cfg.detector_proposals == ProposalSource::SsPlusRpn {
                let opts = ProposeOptions { pre_nms_top: cfg.rpn_pre_nms_top, nms_threshold: cfg.rpn_nms_threshold, k: cfg.k };
                pool.extend(rpn_propose(&g, &rpn, &rpn_input, &opts)?.iter().map(|p| views.map_v1_box(&p.with_score(1.0))));
            }
            let chosen: Vec<ViewBoxes> = sample_indices(&mut rng, pool.len(), cfg.k).into_iter().map(|i| pool[i]).collect();
            let d = det_loss(&mut g, &b, model, &vp, &chosen)?;
            (total_loss(&mut g, l_rpn.total, d.total)?, g.item(d.total))
        }
        None => (l_rpn.total, 0.0),
    };
    let loss_rpn = g.item(l_rpn.total);
    let grads = g.backward(loss)?;
    Ok(ImageStep { loss_rpn, loss_det, grads: b.gradients(&g, &grads) })
}

/// Batch mean of per-image gradients, summed in image order.
fn reduce(steps: &[ImageStep]) -> BTreeMap<String, Vec<f64>> {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in steps {
        for (name, g) in &s.grads {
            let a = acc.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
        }
    }
    let n = steps.len() as f64;
    acc.values_mut().for_each(|v| v.iter_mut().for_each(|x| *x /= n));
    acc
}

/// Runs training on an in-memory set, starting from `pair`. `on_step` sees
/// every step log and the model after the update.
pub fn train(
    pair: &mut ModelPair,
    cfg: &TrainConfig,
    data: &TrainingSet,
    mut on_step: impl FnMut(&StepLog, &ModelPair) -> Result<()>,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = if cfg.steps > 0 { cfg.steps } else { cfg.epochs * per_epoch };
    // the run stream drives shuffling and per-image seeds; initialization
    // uses its own stream
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut velocity = BTreeMap::new();
    let mut log = Vec::with_capacity(total);
    for step in 0..total {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push((order[cursor], rng.gen::<u64>()));
            cursor += 1;
        }
        let snapshot: &ModelPair = pair;
        let results: Vec<ImageStep> = batch
            .par_iter()
            .map(|&(i, seed)| image_step(snapshot, cfg, &data.images[i], &data.proposals[i], seed))
            .collect::<Result<_>>()?;
        let n = results.len() as f64;
        let loss_rpn = results.iter().map(|r| r.loss_rpn).sum::<f64>() / n;
        let loss_det = results.iter().map(|r| r.loss_det).sum::<f64>() / n;
        if !loss_rpn.is_finite() || !loss_det.is_finite() {
            return Err(Error::Config(format!("non-finite loss at step {step}: rpn {loss_rpn}, det {loss_det}")));
        }
        let grads = reduce(&results);
        let lr = cosine_lr(step, total, cfg.base_lr);
        sgd_step(&mut pair.params, &grads, &mut velocity, lr, cfg.sgd_momentum, cfg.weight_decay)?;
        if cfg.strategy == Strategy::Joint {
            pair.ema_update(cfg.momentum)?;
        }
        let entry = StepLog { step: step + 1, loss_rpn, loss_det, lr };
        on_step(&entry, pair)?;
        log.push(entry);
    }
    Ok(log)
}

/// Starting model of a run: fresh for joint training, the base checkpoint
/// for separate training.
pub fn initial_model(cfg: &TrainConfig) -> Result<ModelPair> {
    let model = cfg.model.config();
    match cfg.strategy {
        Strategy::Joint => ModelPair::new(model, cfg.seed),
        Strategy::Separate => {
            let path = cfg
                .base_checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("separate training needs base_checkpoint".into()))?;
            ModelPair::from_store(model, ParamStore::load(path)?)
        }
    }
}

/// Full run from a config: loads data, trains, writes the step log, the
/// snapshots and the final checkpoint.
pub fn run(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let mut pair = initial_model(cfg)?;
    let data = TrainingSet::load(&cfg.corpus, &cfg.proposal_cache)?;
    if data.skipped > 0 {
        warn!("{} images have no cached proposals and are skipped", data.skipped);
    }
    let log_path = cfg.log_path();
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut write_line = |line: String| -> Result<()> { writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e)) };
    write_line(format!("# {} images, {} skipped", data.len(), data.skipped))?;
    write_line("# step loss_rpn loss_det lr".into())?;
    let mut snapshots = Vec::new();
    if cfg.snapshot_every > 0 {
        let p = cfg.snapshot_path(0);
        pair.params.save(&p)?;
        snapshots.push(p);
    }
    let log = train(&mut pair, cfg, &data, |entry, model| {
        write_line(entry.to_string())?;
        info!("{entry}");
        if cfg.snapshot_every > 0 && entry.step % cfg.snapshot_every == 0 {
            let p = cfg.snapshot_path(entry.step);
            model.params.save(&p)?;
            snapshots.push(p);
        }
        Ok(())
    })?;
    pair.params.save(&cfg.checkpoint)?;
    Ok(TrainReport { log, skipped_images: data.skipped, checkpoint: cfg.checkpoint.clone(), snapshots })
}

/// Joint run; the config's strategy must be `joint`.
pub fn train_joint(cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.strategy != Strategy::Joint {
        return Err(Error::Config("train_joint called with strategy = separate".into()));
    }
    run(cfg)
}

/// Separate run; only the RPN layers change.
pub fn train_separate(cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.strategy != Strategy::Separate {
        return Err(Error::Config("train_separate called with strategy = joint".into()));
    }
    run(cfg)
}

#[cfg(test)]
mod tests;
