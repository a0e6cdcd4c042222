//! Detection quality: average precision, proposal recall, and a stratified
//! error analysis that attributes lost mAP to error categories by fixing
//! each category in turn.
//!
//! Detections and ground truth are given per image. Boxes without a class
//! id belong to class 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

fn class_of(b: &BBox) -> u32 {
    b.class_id.unwrap_or(0)
}

fn score_of(b: &BBox) -> f64 {
    b.score.unwrap_or(0.0)
}

/// Precision/recall points of one class, in ranking order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    /// Mean over classes that have ground truth.
    pub map: f64,
    pub per_class: BTreeMap<u32, (f64, PrCurve)>,
}

/// Outcome of greedy matching for every detection, `(image, index)` keyed.
#[derive(Debug, Clone)]
struct Matching {
    /// Ground-truth index matched by each detection, if a true positive.
    tp: Vec<Vec<Option<usize>>>,
    /// Ground truth matched by some detection.
    gt_matched: Vec<Vec<bool>>,
}

/// Detections of all images in descending score order, ties broken by image
/// then by position.
fn ranked(dets: &[Vec<BBox>]) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = dets.iter().enumerate().flat_map(|(i, d)| (0..d.len()).map(move |j| (i, j))).collect();
    all.sort_by(|a, b| score_of(&dets[b.0][b.1]).total_cmp(&score_of(&dets[a.0][a.1])));
    all
}

/// VOC matching: each detection, best first, takes its highest-IoU
/// same-class ground truth if the IoU reaches `thr` and that box is free.
fn greedy_match(dets: &[Vec<BBox>], gts: &[Vec<BBox>], thr: f64) -> Matching {
    let mut tp: Vec<Vec<Option<usize>>> = dets.iter().map(|d| vec![None; d.len()]).collect();
    let mut gt_matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    for (i, j) in ranked(dets) {
        let d = &dets[i][j];
        let best = gts[i]
            .iter()
            .enumerate()
            .filter(|(_, g)| class_of(g) == class_of(d))
            .map(|(k, g)| (k, iou(d, g)))
            .fold(None, |acc: Option<(usize, f64)>, (k, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((k, v)),
            });
        if let Some((k, v)) = best {
            if v >= thr && !gt_matched[i][k] {
                gt_matched[i][k] = true;
                tp[i][j] = Some(k);
            }
        }
    }
    Matching { tp, gt_matched }
}

/// All-point interpolated area under the precision/recall curve.
fn area(curve: &PrCurve) -> f64 {
    let n = curve.precision.len();
    let mut envelope = curve.precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        ap += (curve.recall[i] - prev_recall) * envelope[i];
        prev_recall = curve.recall[i];
    }
    ap
}

/// Per-class AP and their mean.
pub fn ap_details(dets: &[Vec<BBox>], gts: &[Vec<BBox>], iou_thresh: f64) -> Result<ApResult> {
    if dets.len() != gts.len() {
        return Err(Error::Config(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    let m = greedy_match(dets, gts, iou_thresh);
    let mut gt_count: BTreeMap<u32, usize> = BTreeMap::new();
    for g in gts.iter().flatten() {
        *gt_count.entry(class_of(g)).or_default() += 1;
    }
    let order = ranked(dets);
    let mut per_class = BTreeMap::new();
    for (&class, &total) in &gt_count {
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut curve = PrCurve { precision: Vec::new(), recall: Vec::new() };
        for &(i, j) in &order {
            if class_of(&dets[i][j]) != class {
                continue;
            }
            if m.tp[i][j].is_some() {
                tp += 1;
            } else {
                fp += 1;
            }
            curve.precision.push(tp as f64 / (tp + fp) as f64);
            curve.recall.push(tp as f64 / total as f64);
        }
        per_class.insert(class, (area(&curve), curve));
    }
    let map = if per_class.is_empty() { 0.0 } else { per_class.values().map(|v| v.0).sum::<f64>() / per_class.len() as f64 };
    Ok(ApResult { map, per_class })
}

/// Mean average precision at one IoU threshold.
pub fn average_precision(dets: &[Vec<BBox>], gts: &[Vec<BBox>], iou_thresh: f64) -> Result<f64> {
    Ok(ap_details(dets, gts, iou_thresh)?.map)
}

/// Mean of [`average_precision`] over several thresholds, e.g. 0.5:0.05:0.95.
pub fn average_precision_sweep(dets: &[Vec<BBox>], gts: &[Vec<BBox>], thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::Config("empty threshold sweep".into()));
    }
    let mut total = 0.0;
    for &t in thresholds {
        total += average_precision(dets, gts, t)?;
    }
    Ok(total / thresholds.len() as f64)
}

/// Fraction of `gt` overlapped by some proposal at IoU `>= iou_thresh`.
pub fn proposal_recall(proposals: &[BBox], gt: &[BBox], iou_thresh: f64) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let hit = gt.iter().filter(|g| proposals.iter().any(|p| iou(p, g) >= iou_thresh)).count();
    hit as f64 / gt.len() as f64
}

/// Recall over a whole corpus, pooling all ground-truth boxes.
pub fn corpus_recall(proposals: &[Vec<BBox>], gts: &[Vec<BBox>], iou_thresh: f64) -> f64 {
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let hit: usize = proposals
        .iter()
        .zip(gts)
        .map(|(p, g)| g.iter().filter(|g| p.iter().any(|p| iou(p, g) >= iou_thresh)).count())
        .sum();
    hit as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorKind {
    Cls,
    Loc,
    Dupe,
    Bkg,
    Miss,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 5] = [ErrorKind::Cls, ErrorKind::Loc, ErrorKind::Dupe, ErrorKind::Bkg, ErrorKind::Miss];

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Cls => "Cls",
            ErrorKind::Loc => "Loc",
            ErrorKind::Dupe => "Dupe",
            ErrorKind::Bkg => "Bkg",
            ErrorKind::Miss => "Miss",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratifyConfig {
    /// Match threshold and the IoU above which a box is "on" an object.
    pub fg_thresh: f64,
    /// Below this IoU with every object a false positive is background.
    pub bg_thresh: f64,
}

impl Default for StratifyConfig {
    fn default() -> Self {
        Self { fg_thresh: 0.5, bg_thresh: 0.1 }
    }
}

/// Stratified errors: mAP gained by fixing each category on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub base_map: f64,
    pub cls: f64,
    pub loc: f64,
    pub dupe: f64,
    pub bkg: f64,
    pub miss: f64,
    pub false_pos: f64,
    pub false_neg: f64,
    /// Number of errors in each category.
    pub counts: BTreeMap<ErrorKind, usize>,
}

impl ErrorReport {
    /// `(name, delta mAP)` in table order.
    pub fn columns(&self) -> [(&'static str, f64); 7] {
        [
            ("Cls", self.cls),
            ("Loc", self.loc),
            ("Dupe", self.dupe),
            ("Bkg", self.bkg),
            ("Miss", self.miss),
            ("FalsePos", self.false_pos),
            ("FalseNeg", self.false_neg),
        ]
    }

    /// Aligned table, deltas in mAP points (x100).
    pub fn to_table(&self) -> String {
        let cols = self.columns();
        let mut head = format!("{:>8}", "mAP50");
        let mut row = format!("{:>8.2}", 100.0 * self.base_map);
        for (name, v) in cols {
            let _ = write!(head, " {name:>8}");
            let _ = write!(row, " {:>8.2}", 100.0 * v);
        }
        format!("{head}\n{row}\n")
    }

    /// `key=value` lines with raw fractions.
    pub fn to_key_values(&self) -> String {
        let mut out = format!("map50={}\n", self.base_map);
        for (name, v) in self.columns() {
            let _ = writeln!(out, "delta_{}={v}", name.to_lowercase());
        }
        for (k, n) in &self.counts {
            let _ = writeln!(out, "count_{}={n}", k.name().to_lowercase());
        }
        out
    }
}

impl fmt::Display for ErrorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Category of a false positive given its best same-class IoU, and its best
/// other-class IoU.
fn classify_fp(same: f64, other: f64, cfg: &StratifyConfig) -> ErrorKind {
    if same >= cfg.fg_thresh {
        ErrorKind::Dupe
    } else if other >= cfg.fg_thresh {
        ErrorKind::Cls
    } else if same >= cfg.bg_thresh {
        ErrorKind::Loc
    } else if other >= cfg.bg_thresh {
        // wrong class and poorly localized: counted with the class errors
        ErrorKind::Cls
    } else {
        ErrorKind::Bkg
    }
}

struct FpInfo {
    kind: ErrorKind,
    /// Ground truth the fix would snap to.
    target: Option<usize>,
}

fn best_iou<'a>(d: &BBox, gts: impl Iterator<Item = (usize, &'a BBox)>) -> (f64, Option<usize>) {
    gts.fold((0.0, None), |(bv, bk), (k, g)| {
        let v = iou(d, g);
        if v > bv {
            (v, Some(k))
        } else {
            (bv, bk)
        }
    })
}

/// Classifies every false positive and missed box, then measures the mAP
/// gained by each oracle fix: snapping Loc and Cls errors onto their object
/// (or dropping them if that object is already found), dropping Dupe and Bkg
/// errors, removing missed objects, dropping all false positives, and adding
/// a top-scoring perfect detection for every missed object.
pub fn stratify_errors(dets: &[Vec<BBox>], gts: &[Vec<BBox>], cfg: &StratifyConfig) -> Result<ErrorReport> {
    let thr = cfg.fg_thresh;
    let base_map = average_precision(dets, gts, thr)?;
    let m = greedy_match(dets, gts, thr);
    let mut fps: BTreeMap<(usize, usize), FpInfo> = BTreeMap::new();
    for (i, j) in ranked(dets) {
        if m.tp[i][j].is_some() {
            continue;
        }
        let d = &dets[i][j];
        let (same, same_k) = best_iou(d, gts[i].iter().enumerate().filter(|(_, g)| class_of(g) == class_of(d)));
        let (other, other_k) = best_iou(d, gts[i].iter().enumerate().filter(|(_, g)| class_of(g) != class_of(d)));
        let kind = classify_fp(same, other, cfg);
        let target = match kind {
            ErrorKind::Loc => same_k,
            ErrorKind::Cls => other_k,
            _ => None,
        };
        fps.insert((i, j), FpInfo { kind, target });
    }
    let missed: Vec<(usize, usize)> =
        m.gt_matched.iter().enumerate().flat_map(|(i, g)| g.iter().enumerate().filter(|(_, &x)| !x).map(move |(k, _)| (i, k))).collect();

    let mut counts: BTreeMap<ErrorKind, usize> = ErrorKind::ALL.iter().map(|&k| (k, 0)).collect();
    for f in fps.values() {
        *counts.get_mut(&f.kind).expect("all kinds present") += 1;
    }
    counts.insert(ErrorKind::Miss, missed.len());

    let drop_where = |keep: &dyn Fn(usize, usize) -> bool| -> Vec<Vec<BBox>> {
        dets.iter().enumerate().map(|(i, d)| d.iter().enumerate().filter(|(j, _)| keep(i, *j)).map(|(_, b)| *b).collect()).collect()
    };
    let delta = |fixed_dets: &[Vec<BBox>], fixed_gts: &[Vec<BBox>]| -> Result<f64> {
        Ok((average_precision(fixed_dets, fixed_gts, thr)? - base_map).max(0.0))
    };

    // Snap errors of `kind` onto their target object, best first; a target
    // that is already claimed turns the error into a duplicate, which is dropped.
    let snap = |kind: ErrorKind| -> Vec<Vec<BBox>> {
        let mut claimed: Vec<Vec<bool>> = m.gt_matched.clone();
        let mut out: Vec<Vec<Option<BBox>>> = dets.iter().map(|d| d.iter().map(|b| Some(*b)).collect()).collect();
        for (i, j) in ranked(dets) {
            let Some(f) = fps.get(&(i, j)).filter(|f| f.kind == kind) else { continue };
            match f.target {
                Some(k) if !claimed[i][k] => {
                    claimed[i][k] = true;
                    let g = &gts[i][k];
                    out[i][j] = Some(BBox { score: dets[i][j].score, class_id: Some(class_of(g)), ..*g });
                }
                _ => out[i][j] = None,
            }
        }
        out.into_iter().map(|d| d.into_iter().flatten().collect()).collect()
    };

    let fps_ref = &fps;
    let kind_is = |kind: ErrorKind| move |i: usize, j: usize| fps_ref.get(&(i, j)).is_none_or(|f| f.kind != kind);
    let cls = delta(&snap(ErrorKind::Cls), gts)?;
    let loc = delta(&snap(ErrorKind::Loc), gts)?;
    let dupe = delta(&drop_where(&kind_is(ErrorKind::Dupe)), gts)?;
    let bkg = delta(&drop_where(&kind_is(ErrorKind::Bkg)), gts)?;
    let missed_set: BTreeSet<(usize, usize)> = missed.iter().copied().collect();
    let fewer_gts: Vec<Vec<BBox>> =
        gts.iter().enumerate().map(|(i, g)| g.iter().enumerate().filter(|(k, _)| !missed_set.contains(&(i, *k))).map(|(_, b)| *b).collect()).collect();
    let miss = delta(dets, &fewer_gts)?;
    let false_pos = delta(&drop_where(&|i, j| !fps.contains_key(&(i, j))), gts)?;
    let top = dets.iter().flatten().map(score_of).fold(0.0f64, f64::max) + 1.0;
    let mut with_found = dets.to_vec();
    for &(i, k) in &missed {
        with_found[i].push(gts[i][k].with_score(top).with_class(class_of(&gts[i][k])));
    }
    let false_neg = delta(&with_found, gts)?;
    Ok(ErrorReport { base_map, cls, loc, dupe, bkg, miss, false_pos, false_neg, counts })
}

/// A precision/recall plot as a standalone SVG document.
pub fn pr_curve_svg(curves: &[(&str, &PrCurve)]) -> String {
    let (w, h, pad) = (360.0, 300.0, 40.0);
    let px = |r: f64| pad + r * (w - 2.0 * pad);
    let py = |p: f64| h - pad - p * (h - 2.0 * pad);
    let colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<path d=\"M{} {} L{} {} L{} {}\" fill=\"none\" stroke=\"black\"/>",
        px(0.0),
        py(1.0),
        px(0.0),
        py(0.0),
        px(1.0),
        py(0.0)
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">recall</text>", px(0.5), h - 8.0);
    let _ = writeln!(s, "<text x=\"12\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">precision</text>", py(0.5), py(0.5));
    for (n, (label, c)) in curves.iter().enumerate() {
        let colour = colours[n % colours.len()];
        let mut d = format!("M{:.2} {:.2}", px(0.0), py(c.precision.first().copied().unwrap_or(0.0)));
        for (r, p) in c.recall.iter().zip(&c.precision) {
            let _ = write!(d, " L{:.2} {:.2}", px(*r), py(*p));
        }
        let _ = writeln!(s, "<path d=\"{d}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\"/>");
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{colour}\">{label}</text>", px(0.65), py(0.95) + 14.0 * n as f64);
    }
    s.push_str("</svg>\n");
    s
}

/// Parses detection lines `image_id x1 y1 x2 y2 [score] [class_id]`.
pub fn parse_detections(text: &str) -> Result<BTreeMap<String, Vec<BBox>>> {
    let mut out: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, rest) = line.split_once(char::is_whitespace).ok_or_else(|| Error::Parse(format!("line {}: missing box", n + 1)))?;
        let b: BBox = rest.trim().parse().map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        out.entry(id.to_string()).or_default().push(b);
    }
    Ok(out)
}

pub fn format_detections(dets: &BTreeMap<String, Vec<BBox>>) -> String {
    let mut s = String::new();
    for (id, boxes) in dets {
        for b in boxes {
            let _ = writeln!(s, "{id} {b}");
        }
    }
    s
}
